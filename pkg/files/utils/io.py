import io
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
from charset_normalizer import from_path

from config import make_path
from files.shift.distribution import FiniteJointDistribution
from files.shift.errors import InputFileError, ShapeMismatch
from files.shift.selection import SelectionModel
from files.shift.taxonomy import RepresentationMap
from files.utils.logging import get_logger

logger = get_logger('cli')


def read_text(path) -> str:
    """Decode a user-supplied file whatever its encoding."""
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f'file not found: {path}')
    best = from_path(path).best()
    if best is None:
        raise InputFileError(f'cannot decode {path}')
    return str(best)


def load_json(path) -> dict:
    try:
        data = json.loads(read_text(path))
    except json.JSONDecodeError as e:
        raise InputFileError(f'{path} is not valid JSON: {e}') from e
    if not isinstance(data, dict):
        raise InputFileError(f'{path} must hold a JSON object')
    return data


def _require(data: dict, keys, path) -> None:
    missing = [k for k in keys if k not in data]
    if missing:
        raise InputFileError(f'{path} lacks key(s): {", ".join(missing)}')


def read_distribution(path) -> FiniteJointDistribution:
    """JSON ``{"features", "classes", "weights"}`` or CSV ``feature,class,weight``."""
    path = Path(path)
    if path.suffix.lower() == '.csv':
        dist = _read_csv_distribution(path)
    else:
        data = load_json(path)
        _require(data, ('features', 'classes', 'weights'), path)
        try:
            weights = np.asarray(data['weights'], dtype=float)
        except (TypeError, ValueError) as e:
            raise InputFileError(f'{path}: weights must be a numeric table') from e
        dist = FiniteJointDistribution(tuple(data['features']), tuple(data['classes']), weights)
    logger.info('Loaded %s: %d cells x %d classes', path.name, dist.m, dist.d)
    return dist


def _read_csv_distribution(path: Path) -> FiniteJointDistribution:
    """One row per (feature, class) cell; every cell exactly once."""
    frame = pd.read_csv(io.StringIO(read_text(path)), dtype={'feature': str, 'class': str})
    _require(dict.fromkeys(frame.columns), ('feature', 'class', 'weight'), path)
    try:
        frame['weight'] = pd.to_numeric(frame['weight'], errors='raise').astype(float)
    except (TypeError, ValueError) as e:
        raise InputFileError(f'{path}: weight column must be numeric') from e

    duplicated = frame.duplicated(['feature', 'class'], keep=False)
    if duplicated.any():
        pairs = sorted(set(zip(frame.loc[duplicated, 'feature'], frame.loc[duplicated, 'class'])))
        raise InputFileError(f'{path}: duplicate (feature, class) rows: {pairs}')

    features = list(dict.fromkeys(frame['feature']))
    classes = list(dict.fromkeys(frame['class']))
    table = frame.pivot(index='feature', columns='class', values='weight').reindex(index=features, columns=classes)
    missing = table.isna().to_numpy()
    if missing.any():
        pairs = [(features[x], classes[i]) for x, i in np.argwhere(missing)]
        raise InputFileError(f'{path}: missing (feature, class) rows: {pairs}')
    return FiniteJointDistribution(tuple(features), tuple(classes), table.to_numpy(dtype=float))


def _aligned(data: dict, label_key: str, value_key: str, labels, path) -> np.ndarray:
    _require(data, (value_key,), path)
    try:
        values = np.asarray(data[value_key], dtype=float)
    except (TypeError, ValueError) as e:
        raise InputFileError(f'{path}: {value_key} must be numeric') from e
    given = [str(v) for v in data.get(label_key, labels)]
    if sorted(given) != sorted(labels) or len(given) != values.shape[0]:
        raise ShapeMismatch(f'{path}: {label_key} do not match the distribution',
                            expected=list(labels), got=given)
    order = [given.index(label) for label in labels]
    return values[order]


def read_feature_vector(path, dist: FiniteJointDistribution) -> np.ndarray:
    return _aligned(load_json(path), 'features', 'values', dist.feature_labels, path)


def read_priors(path, dist: FiniteJointDistribution) -> np.ndarray:
    return _aligned(load_json(path), 'classes', 'values', dist.class_labels, path)


def read_selection(path, dist: FiniteJointDistribution) -> SelectionModel:
    data = load_json(path)
    key = 'phi' if 'phi' in data else 'weights'
    table = _aligned(data, 'features', key, dist.feature_labels, path)
    classes = [str(c) for c in data.get('classes', dist.class_labels)]
    if sorted(classes) != sorted(dist.class_labels) or table.ndim != 2 or table.shape[1] != len(classes):
        raise ShapeMismatch(f'{path}: classes do not match the distribution')
    return SelectionModel(table[:, [classes.index(c) for c in dist.class_labels]])


def read_representation(path, dist: FiniteJointDistribution) -> RepresentationMap:
    data = load_json(path)
    _require(data, ('groups',), path)
    return RepresentationMap.from_mapping(data['groups'], dist.feature_labels)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        # JSON has no NaN or Infinity
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + '\n'


def dumps_csv(rows, columns) -> str:
    return pd.DataFrame(list(rows), columns=list(columns)).to_csv(index=False, lineterminator='\n')


def save_report(text: str, stem: str, command: str, ext: str = 'json') -> Path:
    path = make_path('reports', stem, command, ext)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    logger.info('Report saved to %s', path)
    return path
