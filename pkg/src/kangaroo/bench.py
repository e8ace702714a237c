"""Benchmark suites producing desk-scale accounting tables (CSV and markdown)."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DEFAULT_FRAC_BITS, FixedPadding, NoPadding, build_packed_model, evaluate_forest_fixed
from .phe import PheParams, keygen, make_backend, preset
from .protocol import forest_infer
from .protocol.comparison import oblivious_compare, sample_blinding
from .protocol.selection import feature_select_I, left_rotations, select_diagonal, selection_shifts
from .rand import make_rng
from .synth import dataset_tree, random_forest, random_inputs
from .transport import NetProfile

SUITES = ("single-tree-large", "forest-scaling", "selection-micro", "comparison-micro")


@dataclass
class BenchReport:
    scenario: str
    model: str  # "M=.. D=.. tau=.. K=.."
    backend: str
    profile: str
    rounds: float = 0.0
    setup_bytes: int = 0
    query_bytes: int = 0
    compare_cts: int = 0
    sim_wall_ms: float = 0.0
    t_encrypt_ms: float = 0.0
    t_select_ms: float = 0.0
    t_compare_ms: float = 0.0
    t_path_ms: float = 0.0
    t_respond_ms: float = 0.0
    trees: int = 1
    per_tree_bytes: float = 0.0
    per_tree_ms: float = 0.0
    correct: bool = True
    notes: str = ""
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update({f"x_{k}": v for k, v in extra.items()})
        return d


def _components(client, server) -> dict:
    c, s = client.timings, server.timings
    return {
        "t_encrypt_ms": c["encrypt"],
        "t_select_ms": s["select"],
        "t_compare_ms": s["ready"] - s["select"] + c["query"] + s["compare"],
        "t_path_ms": c["compare"] + s["path"] + c["path"],
        "t_respond_ms": s["path_cmp"] + c["path_cmp"],
    }


def _shape(forest) -> str:
    taus = [t.decision_count for t in forest.trees]
    depths = [t.depth for t in forest.trees]
    return f"M={forest.feature_count} D={max(depths)} tau={max(taus)} K={len(forest.trees)}"


def _run_forest(scenario, forest, params, profiles, seed, policy=None, mode="auto", queries=1, strategy="auto"):
    rng = make_rng(seed)
    pm, _, _ = build_packed_model(forest, params.plain_modulus, params.slot_count, params.zeta, rng,
                                  policy=policy, mode=mode)
    xq = [pm.spec.quantize_vector(x) for x in random_inputs(rng, forest, queries)]
    t0 = time.perf_counter()
    res = forest_infer(params, pm, xq, protocol_seed=int(rng.integers(0, 2**63)),
                       backend_seed=int(rng.integers(0, 2**63)), strategy=strategy)
    elapsed = (time.perf_counter() - t0) * 1000
    want = [evaluate_forest_fixed(forest.trees, x, pm.spec, pm.frac_bits) for x in xq]
    tr = res.transcript
    cmp_cts = pm.layout.node_groups
    comps = {k: v / queries for k, v in _components(res.client, res.server).items()}
    K = len(forest.trees)
    out = []
    for prof in profiles:
        sim = tr.resimulate(prof)
        qb = tr.total_bytes(False) // queries
        out.append(BenchReport(
            scenario, _shape(forest), params.backend_id, prof.name, tr.round_trips(False) / queries,
            tr.total_bytes(True), qb, cmp_cts, sim.wall_ms(False) / queries, trees=K, per_tree_bytes=qb / K,
            per_tree_ms=(sum(comps.values()) + sim.wall_ms(False) / queries) / K, correct=res.pi == want,
            notes=f"layout={pm.layout.mode} strategy={res.server.strategy} groups={pm.layout.node_groups}"
                  f"/{pm.layout.leaf_groups} run_ms={elapsed:.0f}",
            **comps))
    return out


def suite_single_tree_large(params, profiles, seed):
    forest = dataset_tree("boston", seed)
    return _run_forest("single-tree-large", forest, params, profiles, seed, policy=NoPadding())


def suite_forest_scaling(params, profiles, seed, sizes=(1, 4, 16, 64, 256), depth=3, features=8):
    out = []
    tau = (1 << depth) - 1
    for K in sizes:
        # keep K * max|w| * 2^f below q/2 so small plaintext moduli still aggregate exactly
        scale = min(8.0, 0.9 * params.plain_modulus / 2 / (K * (1 << DEFAULT_FRAC_BITS)))
        forest = random_forest(make_rng((seed, K)), K, features, depth, tau, weight_scale=scale)
        out += _run_forest("forest-scaling", forest, params, profiles, seed, policy=FixedPadding(tau),
                           mode="interleaved")
    return out


def suite_selection_micro(params, profiles, seed, blocks=(2, 4, 8, 12, 16, 32)):
    be = make_backend(params, seed)
    rng = make_rng(seed)
    out = []
    for blk in blocks:
        keys = be.keygen(selection_shifts(blk), seed=seed)
        x = np.tile(rng.integers(0, 1000, blk, dtype=np.uint64), params.slot_count // blk)
        x = np.concatenate([x, np.zeros(params.slot_count - len(x), dtype=np.uint64)])
        ct = be.encrypt(keys.public_key, x)
        mask = np.zeros(params.slot_count, dtype=np.uint64)
        starts = np.arange(params.slot_count // blk) * blk
        feats = rng.integers(0, blk, len(starts))
        mask[starts + feats] = 1
        t0 = time.perf_counter()
        feature_select_I(be, ct, blk, mask, keys)
        t_alg = (time.perf_counter() - t0) * 1000
        diag = {}
        for d in range(blk):
            sel = np.zeros(params.slot_count, dtype=np.uint64)
            sel[starts[feats == d]] = 1
            if sel.any():
                diag[d] = sel
        t0 = time.perf_counter()
        select_diagonal(be, left_rotations(be, ct, max(diag), keys), diag)
        t_diag = (time.perf_counter() - t0) * 1000
        out.append(BenchReport("selection-micro", f"M*={blk} S={params.slot_count}", params.backend_id, "-",
                               t_select_ms=t_alg, extra={"diagonal_ms": round(t_diag, 3),
                                                        "rotations_alg1": math.ceil(math.log2(blk)),
                                                        "rotations_diagonal": max(diag)}))
    return out


def suite_comparison_micro(params, profiles, seed, slot_counts=None):
    rng = make_rng(seed)
    out = []
    if params.backend_id == "lattice":
        slot_counts = [params.slot_count]
    for S in slot_counts or (16, 64, 256, 1024, 4096, 16384):
        p = params if params.backend_id == "lattice" else PheParams(
            slot_count=S, plain_modulus=params.plain_modulus, backend_id="transparent", name=f"S{S}")
        be = make_backend(p, seed)
        keys = keygen(p, (), seed=seed)
        zeta = p.zeta
        x = rng.integers(0, zeta + 1, S, dtype=np.uint64)
        y = rng.integers(0, zeta + 1, S, dtype=np.uint64)
        ct = be.encrypt(keys.public_key, x)
        reps = 5
        t0 = time.perf_counter()
        ok = True
        for _ in range(reps):
            b = sample_blinding(rng, p.plain_modulus, zeta, np.ones(S, dtype=bool))
            c, _ = oblivious_compare(be, ct, y, b, keys)
            ok &= bool((be.decrypt(keys.secret_key, c) == (x >= y)).all())
        ms = (time.perf_counter() - t0) * 1000 / reps
        out.append(BenchReport("comparison-micro", f"S={S}", p.backend_id, "-", t_compare_ms=ms, correct=ok,
                               extra={"per_slot_us": round(ms * 1000 / S, 4)}))
    return out


_SUITE_FN = {
    "single-tree-large": suite_single_tree_large,
    "forest-scaling": suite_forest_scaling,
    "selection-micro": suite_selection_micro,
    "comparison-micro": suite_comparison_micro,
}


def run_suite(name: str, params_name: str = "desk-small", backend: str = "transparent", profiles=("wan",),
              seed: int = 0, **kw) -> list[BenchReport]:
    if name not in _SUITE_FN:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    params = preset(params_name, backend)
    profs = [p if isinstance(p, NetProfile) else NetProfile.parse(p) for p in profiles]
    return _SUITE_FN[name](params, profs, seed, **kw)


def to_csv(reports) -> str:
    rows = [r.row() for r in reports]
    cols = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def to_markdown(reports) -> str:
    rows = [r.row() for r in reports]
    cols = [c for c in dict.fromkeys(k for r in rows for k in r) if any(r.get(c) not in (0, 0.0, "", None) for r in rows)]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.2f}"
        return "" if v is None else str(v)

    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(fmt(r.get(c)) for c in cols) + " |")
    return "\n".join(lines) + "\n"


__all__ = ["BenchReport", "SUITES", "run_suite", "to_csv", "to_markdown"]
