import os
from pathlib import Path

from dotenv import load_dotenv


ROOT_DIR = Path(__file__).resolve().parent
load_dotenv(ROOT_DIR / '.env')

LOG_DIR = Path(os.getenv('SHIFTKIT_LOG_DIR', str(ROOT_DIR / 'logs')))
DATA_DIR = ROOT_DIR / 'data'
EXAMPLES_DIR = DATA_DIR / 'examples'

LOG_LEVEL = os.getenv('SHIFTKIT_LOG_LEVEL', 'INFO')

# solver defaults
DEFAULT_TOL = float(os.getenv('SHIFTKIT_TOL', '1e-12'))
DEFAULT_MAX_ITER = int(os.getenv('SHIFTKIT_MAX_ITER', '10000'))
DEFAULT_DAMPING = float(os.getenv('SHIFTKIT_DAMPING', '1.0'))
DEFAULT_SEED = int(os.getenv('SHIFTKIT_SEED', '42'))

# structural tolerances
STRUCTURE_TOL = 1e-12
DENSITY_TOL = 1e-10
CHECK_RTOL = 1e-9
CHECK_ATOL = 1e-12
ADMISSIBILITY_TOL = 1e-12
INDEPENDENCE_TOL = 1e-12


def make_name(stem: str, suffix: str, ext: str) -> str:
    """
    Returns: d1_source_classify.json (etc.)
    """
    stem = Path(stem).stem
    return f'{stem}_{suffix}.{ext}'


def make_path(subdir: str, stem: str, suffix: str, ext: str) -> Path:
    """
    Returns: full path inside subfolder (e.g. data/reports/d1_source_classify.json)
    """
    filename = make_name(stem, suffix, ext)
    return DATA_DIR / subdir / filename
