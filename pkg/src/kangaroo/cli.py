"""Command-line entry point: keygen | pack | serve | infer | bench | convert."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import socket
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .errors import KangarooError
from .model import (MAGIC_PACKED, MAGIC_PUBLIC, Forest, PackedModel, QuantizationSpec,
                    build_packed_model, padding_policy,
                    public_bundle_bytes, public_bundle_from_bytes, unpack_arrays)
from .phe import PRESET_NAMES, make_backend, preset, unpack_container
from .protocol import ClientSession, ServerSession, client_shifts
from .transport import NetProfile, Transcript, run_session, serve_tcp, tcp_exchange

log = logging.getLogger("kangaroo")

KEY_FILES = {"secret": "secret.key", "public": "public.key", "rotation": "rotation.key"}
PACK_FILE, BUNDLE_FILE, PARAMS_FILE = "model.kpack", "bundle.kpub", "params.json"


def _params(args):
    return preset(args.params, args.backend)


def _out_dir(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_params(out: Path, args):
    (out / PARAMS_FILE).write_text(json.dumps({"params": args.params, "backend": args.backend}) + "\n")


def _block_from(args) -> int:
    if args.bundle:
        return int(public_bundle_from_bytes(Path(args.bundle).read_bytes())["layout"]["block"])
    return args.block


def cmd_keygen(args):
    params = _params(args)
    out = _out_dir(args)
    be = make_backend(params, args.seed)
    shifts = client_shifts({"layout": {"block": _block_from(args)}})
    t0 = time.perf_counter()
    keys = be.keygen(shifts, seed=args.seed)
    (out / KEY_FILES["secret"]).write_bytes(be.secret_key_bytes(keys))
    (out / KEY_FILES["public"]).write_bytes(be.public_key_bytes(keys))
    (out / KEY_FILES["rotation"]).write_bytes(be.rotation_keys_bytes(keys))
    _write_params(out, args)
    print(f"keys for {params.name} ({params.backend_id}) written to {out} "
          f"in {time.perf_counter() - t0:.2f}s; shifts {sorted(shifts)}")
    return 0


def cmd_pack(args):
    params = _params(args)
    out = _out_dir(args)
    try:
        forest = Forest.from_json(Path(args.model).read_text())
    except (OSError, ValueError) as e:
        raise KangarooError(f"cannot read model: {e}") from None
    pm, _, _ = build_packed_model(forest, params.plain_modulus, params.slot_count, params.zeta,
                                  np.random.default_rng(args.seed), padding_policy(args.padding, args.tau),
                                  args.mode, args.block, args.frac_bits, args.comparison)
    (out / PACK_FILE).write_bytes(pm.to_bytes())
    (out / BUNDLE_FILE).write_bytes(public_bundle_bytes(pm.public_bundle()))
    _write_params(out, args)
    lay = pm.layout
    print(f"packed {lay.tree_count} trees: layout={lay.mode} M*={lay.block} "
          f"node groups={lay.node_groups} leaf groups={lay.leaf_groups} -> {out}")
    return 0


def _load_client_keys(params, key_dir: Path):
    be = make_backend(params)
    return be.load_keys((key_dir / KEY_FILES["public"]).read_bytes(), (key_dir / KEY_FILES["rotation"]).read_bytes(),
                        (key_dir / KEY_FILES["secret"]).read_bytes())


def cmd_serve(args):
    params = _params(args)
    pm = PackedModel.from_bytes(Path(args.model).read_bytes())
    seed = iter(np.random.SeedSequence(args.seed).spawn(1 << 16)) if args.seed is not None else None

    def factory():
        return ServerSession(params, pm, seed=next(seed) if seed else None, strategy=args.strategy)

    factory()  # validate parameters before binding
    srv = serve_tcp(factory, args.host, args.port)
    print(f"serving on {srv.address[0]}:{srv.address[1]}", flush=True)
    try:
        if args.duration:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        srv.close()
    return 0


def _read_features(path: str) -> list[list[float]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                continue  # header line
    return rows


def cmd_infer(args):
    params = _params(args)
    bundle = public_bundle_from_bytes(Path(args.bundle).read_bytes())
    keys = _load_client_keys(params, Path(args.keys))
    client = ClientSession(params, keys, bundle, seed=args.seed)
    spec = QuantizationSpec(tuple(bundle["x_min"]), tuple(bundle["x_max"]), int(bundle["zeta"]))
    queries = [spec.quantize_vector(x) for x in _read_features(args.features)]
    transcript = Transcript()
    if args.model:
        pm = PackedModel.from_bytes(Path(args.model).read_bytes())
        server = ServerSession(params, pm, seed=args.seed, strategy=args.strategy)
        pis, transcript = run_session(client, server, "sim", args.net, queries)
    else:
        host, _, port = args.connect.rpartition(":")
        pis = []
        with socket.create_connection((host or "127.0.0.1", int(port))) as sock:
            tcp_exchange(client, None, client.hello(), transcript, sock)
            for xq in queries:
                tcp_exchange(client, None, client.query(xq), transcript, sock)
                pis.append(client.result)
    profile = NetProfile.parse(args.net)
    shaped = transcript.resimulate(profile)
    for pi in pis:
        print(f"pi={client.dequantized(pi):.6f} raw={pi}")
    s = shaped.summary()
    print(f"rounds/query={s['round_trips'] / max(1, len(pis)):.1f} setup_bytes={s['setup_bytes']} "
          f"query_bytes={s['query_bytes']} simulated_{profile.name}_ms={s['query_wall_ms']:.2f}")
    if args.transcript:
        shaped.to_csv(args.transcript)
    return 0


def cmd_bench(args):
    out = _out_dir(args)
    suites = bench_mod.SUITES if args.suite == "all" else [args.suite]
    profiles = [p for p in args.net.split(",") if p]
    reports = []
    for name in suites:
        t0 = time.perf_counter()
        reports += bench_mod.run_suite(name, args.params, args.backend, profiles, args.seed or 0)
        log.info("suite %s done in %.1fs", name, time.perf_counter() - t0)
    (out / "bench.csv").write_text(bench_mod.to_csv(reports))
    md = bench_mod.to_markdown(reports)
    (out / "bench.md").write_text(md)
    print(md)
    return 0


def cmd_convert(args):
    data = Path(args.input).read_bytes()
    if data[:8] == MAGIC_PACKED:
        pm = PackedModel.from_bytes(data)
        doc = {"public": pm.public_bundle(),
               "trees": [unpack_arrays(pm, k)._asdict() for k in range(pm.tree_count)]}
    elif data[:8] == MAGIC_PUBLIC:
        doc = public_bundle_from_bytes(data)
    else:
        magic, bid, payload = unpack_container(data)
        doc = {"magic": magic.rstrip(b"\0").decode(errors="replace"), "backend": bid, "payload_bytes": len(payload)}
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--params", default="desk-small", choices=PRESET_NAMES, help="parameter preset")
    common.add_argument("--backend", default="lattice", choices=("transparent", "lattice"))
    common.add_argument("--net", default="lan", help="lan|man|wan or name:bandwidth_bps:rtt_ms")
    common.add_argument("--seed", type=int, default=None, help="u64 seed for reproducible runs")
    common.add_argument("--out", default=".", help="output directory")

    ap = argparse.ArgumentParser(prog="kangaroo", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("keygen", parents=[common], help="generate client key material")
    p.add_argument("--bundle", help="public bundle; rotation keys follow its block size")
    p.add_argument("--block", type=int, default=16, help="block size when no bundle is given")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("pack", parents=[common], help="hide, lay out and pack a model JSON")
    p.add_argument("model")
    p.add_argument("--padding", default="full", choices=("full", "fixed", "none"))
    p.add_argument("--tau", type=int, default=None, help="cap (full) or target size (fixed)")
    p.add_argument("--mode", default="auto", choices=("auto", "interleaved", "adaptive"))
    p.add_argument("--block", type=int, default=None)
    p.add_argument("--frac-bits", type=int, default=12)
    p.add_argument("--comparison", default="base", choices=("base", "plus"))
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("serve", parents=[common], help="serve a packed model over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7788)
    p.add_argument("--strategy", default="auto", choices=("auto", "rotate-sum", "diagonal"))
    p.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("infer", parents=[common], help="run queries against a server")
    p.add_argument("--bundle", required=True)
    p.add_argument("--keys", required=True, help="directory written by keygen")
    p.add_argument("--features", required=True, help="CSV, one raw feature vector per row")
    p.add_argument("--connect", default="127.0.0.1:7788")
    p.add_argument("--model", help="run the server in-process from this packed model instead")
    p.add_argument("--strategy", default="auto", choices=("auto", "rotate-sum", "diagonal"))
    p.add_argument("--transcript", help="write the transcript CSV here")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="run benchmark suites")
    p.add_argument("--suite", default="all", choices=("all",) + bench_mod.SUITES)
    p.set_defaults(fn=cmd_bench, backend="transparent", net="wan")

    p = sub.add_parser("convert", help="decode a packed model or bundle to JSON")
    p.add_argument("input")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_convert)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KANGAROO_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KangarooError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
