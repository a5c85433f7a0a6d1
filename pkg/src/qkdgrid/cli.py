"""Command-line entry point: ``qkdgrid run | verify | qber``.

Exit status: 0 on success, 1 when a check fails, 2 on configuration or
usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import library, load_config
from .errors import ConfigError
from .qkd import NO_EVE, EveModel, Mode, qber_statistics
from .topology import certify_perturbation

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qkdgrid", description="QKD-secured microgrid secondary control simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario and write CSV outputs")
    r.add_argument("--scenario", required=True,
                   help="scenario file, or a library name: " + ", ".join(library()))
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--out", help="output directory (overrides $QKDGRID_OUT and the scenario)")
    r.add_argument("--mode", choices=[m.value for m in Mode], help="override the scenario mode")
    r.add_argument("--quiet", action="store_true", help="print nothing on success")

    v = sub.add_parser("verify", help="exhaustively certify the matrix perturbation")
    v.add_argument("--n", type=int, action="append",
                   help="network size (repeatable); default checks N=4 and N=6")
    v.add_argument("--max-flagged", type=int, help="largest flagged subset (default n-1)")

    q = sub.add_parser("qber", help="BB84 sift-fraction and QBER statistics")
    q.add_argument("--n", type=int, default=16384, help="raw qubits per session")
    q.add_argument("--eve", choices=["none", "intercept"], default="none")
    q.add_argument("--p-intercept", type=float, default=1.0)
    q.add_argument("--sessions", type=int, default=50)
    q.add_argument("--noise", type=float, default=0.0, help="channel bit-flip probability")
    q.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    from .runner import run

    cfg = load_config(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = Mode(args.mode)
    if changes:
        cfg = cfg.replace(**changes)
    result = run(cfg, args.out)
    if not args.quiet:
        print(result.summary.to_text())
        print(f"outputs written to {result.out_dir}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    sizes = args.n or [4, 6]
    ok = True
    for n in sizes:
        if n < 2:
            raise ConfigError("--n must be at least 2")
        rep = certify_perturbation(n, args.max_flagged)
        status = "PASS" if rep.ok else "FAIL"
        print(f"N={rep.n} |F|<={rep.max_flagged}: {rep.cases} cases, {len(rep.failures)} failures  {status}")
        for f in rep.failures[:10]:
            print(f"  {f}")
        ok &= rep.ok
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_qber(args) -> int:
    if args.n < 16 or args.sessions < 1:
        raise ConfigError("--n must be at least 16 and --sessions at least 1")
    if not 0 <= args.noise <= 1 or not 0 <= args.p_intercept <= 1:
        raise ConfigError("--noise and --p-intercept must lie in [0, 1]")
    eve = NO_EVE if args.eve == "none" else EveModel("intercept_resend", args.p_intercept)
    rng = np.random.Generator(np.random.Philox(args.seed))
    st = qber_statistics(args.sessions, args.n, eve, rng, p_noise=args.noise)
    sift_sigma = np.sqrt(0.25 / (args.sessions * args.n))
    print(f"sessions={st.sessions} n_raw={st.n_raw} eve={args.eve}")
    print(f"sift_fraction={st.sift_fraction:.6f} (sigma {sift_sigma:.2e})")
    print(f"qber={st.qber:.6f} (sigma {st.qber_sigma:.2e}, {st.discrepancies}/{st.sacrificed} sampled)")
    print(f"key_error_rate={st.key_error_rate:.6f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "verify": _cmd_verify, "qber": _cmd_qber}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"qkdgrid: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as e:
        print(f"qkdgrid: check failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
