import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import DEFAULT_SEED
from files.shift.distribution import density, feature_density, posterior_rows, require_valid, validate
from files.shift.errors import ShiftkitError, UsageError
from files.shift.fjs import binary_phi, correct_posteriors_fjs, estimate_priors_em, solve_rho
from files.shift.normal_form import correct_posteriors, normal_form, reverse
from files.shift.selection import analyze_fjs_selection, simulate_selection
from files.shift.taxonomy import classify, correct_prior_shift
from files.utils.io import (
    dumps_csv,
    dumps_report,
    read_distribution,
    read_feature_vector,
    read_priors,
    read_representation,
    read_selection,
    save_report,
)
from files.utils.logging import get_logger

logger = get_logger('cli')

CSV_COMMANDS = ('phi-curve', 'simulate-selection')
CSV_BY_DEFAULT = ('phi-curve',)


@dataclass
class Output:
    report: dict
    rows: list = field(default_factory=list)
    columns: tuple = ()
    exit_code: int = 0


def parse_grid(text: str) -> np.ndarray:
    """'start:stop:step' with both ends included."""
    try:
        start, stop, step = (float(v) for v in text.split(':'))
    except ValueError:
        raise UsageError(f'grid must look like start:stop:step, got {text!r}') from None
    if step <= 0 or stop < start:
        raise UsageError(f'invalid grid {text!r}')
    count = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(count), 12)


def cmd_validate(args) -> Output:
    report = validate(read_distribution(args.path)).to_dict()
    return Output(report, exit_code=0 if report['valid'] else 1)


def cmd_decompose(args) -> Output:
    P, Q = read_distribution(args.source), read_distribution(args.target)
    form = normal_form(P, Q)
    h_bar = density(Q, P)
    report = {
        'normal_form': form.to_dict(P),
        'density': h_bar.values.tolist(),
        'feature_density': feature_density(Q, P).values.tolist(),
        'reconstruction_error': float(np.max(np.abs(form.reconstruct().values - h_bar.values))),
    }
    try:
        inverse = reverse(P, Q)
        report['reverse'] = {
            'inverse_density': inverse.inverse_density.values.tolist(),
            'source_posteriors': inverse.source_posteriors.values.tolist(),
        }
    except ShiftkitError as e:
        report['reverse'] = e.to_dict()
    return Output(report)


def cmd_correct(args) -> Output:
    P = read_distribution(args.source)
    require_valid(P, 'source')
    posteriors = posterior_rows(P.weights)
    if args.target:
        Q = read_distribution(args.target)
        form = normal_form(P, Q)
        table = correct_posteriors(posteriors, P.priors, Q.priors, form.class_densities)
        method = 'class_densities'
    elif args.priors:
        q = read_priors(args.priors, P)
        if args.rho:
            table = correct_posteriors_fjs(posteriors, P.priors, q, np.asarray(args.rho))
            method = 'fjs'
        else:
            table = correct_prior_shift(posteriors, P.priors, q)
            method = 'prior_shift'
    else:
        raise UsageError('correct needs --target or --priors')
    return Output({'method': method, **table.to_dict(P)})


def cmd_solve_rho(args) -> Output:
    P = read_distribution(args.source)
    h = read_feature_vector(args.density, P)
    q = read_priors(args.priors, P)
    result = solve_rho(P, h, q, tol=args.tol, max_iter=args.max_iter, damping=args.damping)
    return Output(result.to_dict(P))


def cmd_estimate_priors(args) -> Output:
    P = read_distribution(args.source)
    require_valid(P, 'source')
    if args.target:
        Q = read_distribution(args.target)
        P.require_same_layout(Q)
        marginal = Q.feature_marginal
    elif args.target_marginal:
        marginal = read_feature_vector(args.target_marginal, P)
    else:
        raise UsageError('estimate-priors needs --target or --target-marginal')
    result = estimate_priors_em(posterior_rows(P.weights), P.priors, marginal, tol=args.tol, max_iter=args.max_iter)
    return Output({'classes': list(P.class_labels), **result.to_dict()})


def cmd_phi_curve(args) -> Output:
    P = read_distribution(args.source)
    h = read_feature_vector(args.density, P)
    curve = binary_phi(P, h, parse_grid(args.grid), tol=args.tol, max_iter=args.max_iter)
    return Output(curve.to_dict(), rows=curve.rows(), columns=('q', 'rho', 'residual'))


def cmd_classify(args) -> Output:
    P, Q = read_distribution(args.source), read_distribution(args.target)
    T = read_representation(args.map, P) if args.map else None
    kwargs = {} if args.tol is None else {'tol': args.tol}
    return Output(classify(P, Q, T, **kwargs).to_dict())


def cmd_simulate_selection(args) -> Output:
    P = read_distribution(args.dist)
    sel = read_selection(args.phi, P)
    result = simulate_selection(P, sel, args.n, seed=args.seed)
    rows = [(x, c, int(result.counts[i, j]))
            for i, x in enumerate(P.feature_labels) for j, c in enumerate(P.class_labels)]
    return Output(result.to_dict(P), rows=rows, columns=('feature', 'class', 'count'))


def cmd_analyze_selection(args) -> Output:
    P = read_distribution(args.dist)
    sel = read_selection(args.phi, P)
    analysis = analyze_fjs_selection(P, sel, mode=args.mode, tol=args.tol, max_iter=args.max_iter,
                                     damping=args.damping, require_admissible=args.require_admissible)
    return Output(analysis.to_dict(P))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--tol', type=float, default=None, help='solver / check tolerance')
    common.add_argument('--max-iter', type=int, default=None, help='iteration cap for solvers')
    common.add_argument('--damping', type=float, default=None, help='initial damping factor in (0, 1]')
    common.add_argument('--seed', type=int, default=DEFAULT_SEED, help='random seed for simulation')
    common.add_argument('--format', choices=('json', 'csv'), default=None,
                        help='output format (csv for phi-curve, json otherwise)')
    common.add_argument('--save', action='store_true', help='also write the report under data/reports/')

    parser = argparse.ArgumentParser(prog='shiftkit', description='Exact analysis of dataset shift on finite tables.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('validate', parents=[common], help='check a distribution file')
    p.add_argument('path')
    p.set_defaults(handler=cmd_validate, stem='path')

    p = sub.add_parser('decompose', parents=[common], help='normal form of the joint density')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--target', required=True)
    p.set_defaults(handler=cmd_decompose, stem='source')

    p = sub.add_parser('correct', parents=[common], help='target posteriors from source posteriors')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--target')
    p.add_argument('--priors', help='target priors file (prior-shift or FJS correction)')
    p.add_argument('--rho', type=float, nargs='+', help='FJS constants for classes 1..d-1')
    p.set_defaults(handler=cmd_correct, stem='source')

    p = sub.add_parser('solve-rho', parents=[common], help='FJS constants for known h and q')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--density', required=True, help='feature density file')
    p.add_argument('--priors', required=True, help='target priors file')
    p.set_defaults(handler=cmd_solve_rho, stem='source')

    p = sub.add_parser('estimate-priors', parents=[common], help='EM estimate of target priors')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--target')
    p.add_argument('--target-marginal')
    p.set_defaults(handler=cmd_estimate_priors, stem='source')

    p = sub.add_parser('phi-curve', parents=[common], help='binary rho as a function of q')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--density', required=True)
    p.add_argument('--grid', default='0.1:0.9:0.05', help='start:stop:step')
    p.set_defaults(handler=cmd_phi_curve, stem='source')

    p = sub.add_parser('classify', parents=[common], help='flag the kinds of shift between two tables')
    p.add_argument('--source', '--dist', dest='source', required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--map', help='representation map file')
    p.set_defaults(handler=cmd_classify, stem='source')

    p = sub.add_parser('simulate-selection', parents=[common], help='Monte Carlo sample selection')
    p.add_argument('--dist', required=True)
    p.add_argument('--phi', required=True)
    p.add_argument('-n', type=int, default=100000)
    p.set_defaults(handler=cmd_simulate_selection, stem='dist')

    p = sub.add_parser('analyze-selection', parents=[common], help='FJS analysis of a selection model')
    p.add_argument('--dist', required=True)
    p.add_argument('--phi', required=True)
    p.add_argument('--mode', choices=('alpha-one', 'known-priors'), default='known-priors')
    p.add_argument('--require-admissible', action='store_true')
    p.set_defaults(handler=cmd_analyze_selection, stem='dist')
    return parser


def output_format(args) -> str:
    if args.format is not None:
        return args.format
    return 'csv' if args.command in CSV_BY_DEFAULT else 'json'


def render(args, output: Output) -> str:
    if output_format(args) == 'csv':
        if args.command not in CSV_COMMANDS:
            raise UsageError(f'--format csv is only available for {", ".join(CSV_COMMANDS)}')
        return dumps_csv(output.rows, output.columns)
    return dumps_report(output.report)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        output = args.handler(args)
        text = render(args, output)
    except ShiftkitError as e:
        code = 2 if isinstance(e, UsageError) else 1
        logger.error('%s failed with %s: %s', args.command, e.name, e.message)
        sys.stdout.write(dumps_report({'error': e.name, 'message': e.message}))
        return code

    sys.stdout.write(text)
    if args.save:
        save_report(text, Path(getattr(args, args.stem)).stem, args.command,
                    output_format(args))
    logger.info('%s finished with exit code %d', args.command, output.exit_code)
    return output.exit_code


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
