"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the run.

The default training run and the two ablation grids take a long time on a
CPU. Their artifacts are cached under ``runs/acceptance`` (or
``$ISDA_ACCEPTANCE_DIR``). The cache key hashes the run config together with
every source file of the package, so a code change forces a fresh run.
"""
import hashlib
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from isda import ablate, cli
from isda.config import RunConfig
from isda.data import load_split, rle_decode, rle_encode
from isda.gradcheck import run_suite
from isda.matching import hungarian, set_loss
from isda.metrics import evaluate
from isda.train import CHECKPOINT, TRAIN_LOG, count_agreement, evaluate_model, load_model
from isda.transformer import Decoder, MSDeformAttn, flatten_pyramid
from isda.core import bilinear_sample

from test_metrics import micro_benchmark, oracle

D = torch.float64
PKG = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ISDA_ACCEPTANCE_DIR", PKG / "runs" / "acceptance"))


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted((PKG / "src" / "isda").rglob("*.py")):
        h.update(p.relative_to(PKG).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def cached_dir(name: str, cfg: RunConfig) -> Path:
    return CACHE / f"{name}-{cfg.digest()[:8]}-{source_digest()}"


# ---------------------------------------------------------------- long runs


@pytest.fixture(scope="module")
def default_run():
    """The default-config training run behind criteria 5 and 8."""
    data = CACHE / "data"
    cfg = RunConfig({"data.dir": str(data)})
    out = cached_dir("default", cfg)
    result = out / "result.json"
    if not result.exists():
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        assert cli.main(["train", "--out", str(out), "--set", f"data.dir={data}"]) == 0
        seconds = time.perf_counter() - t0
        model = load_model(cfg, out / CHECKPOINT)
        val = load_split(data, "val")
        report = evaluate_model(model, val).as_dict()
        counts = count_agreement(model, val, cfg["head.score_threshold"])
        result.write_text(json.dumps({"seconds": seconds, "report": report, "count_agreement": counts}, indent=1))
    res = json.loads(result.read_text())
    res["log"] = [json.loads(l) for l in (out / TRAIN_LOG).read_text().splitlines()]
    res["dir"] = out
    res["cfg"] = cfg
    return res


@pytest.fixture(scope="module")
def ablation_rows():
    """Both ablation grids at the configured ``ablate.*`` scale, via the CLI."""
    cfg = RunConfig()
    out = cached_dir("ablate", cfg)
    done = out / "done"
    if not done.exists():
        out.mkdir(parents=True, exist_ok=True)
        assert cli.main(["ablate", "--out", str(out)]) == 0
        done.write_text("")
    return ablate.read_csv(out / "ablation.csv")


# ---------------------------------------------------------------- criteria


def test_c1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(0)
    seconds = time.perf_counter() - t0
    worst = max(r.worst for r in results)
    ok = all(r.passed for r in results) and seconds < 300
    failed = [r.name for r in results if not r.passed]
    verdict("C1 gradient suite", ok, f"{len(results)} checks, worst rel err {worst:.2e}, {seconds:.0f} s, failed={failed}")
    assert ok


def _brute(cost):
    g, n = cost.shape
    best = None
    for perm in itertools.permutations(range(n), g):
        s = 0.0
        for i, j in enumerate(perm):
            s = s + cost[i, j]
        best = s if best is None else min(best, s)
    return best


def test_c2_hungarian_oracle(verdict):
    rng = np.random.default_rng(2024)
    shapes = [(g, n) for g in range(1, 7) for n in range(g, 9)]
    seconds = 0.0
    mismatches = 0
    count = 0
    while count < 210:
        g, n = shapes[count % len(shapes)]
        cost = rng.normal(size=(g, n)) if count % 2 else rng.integers(-4, 5, size=(g, n)).astype(float)
        t0 = time.perf_counter()
        a = hungarian(cost)
        seconds += time.perf_counter() - t0
        s = 0.0
        for i, j in a.pairs:
            s = s + cost[i, j]
        mismatches += s != _brute(cost)
        count += 1
    ok = mismatches == 0 and seconds < 10
    verdict("C2 Hungarian oracle", ok, f"{count} matrices up to 6x8, {mismatches} mismatches, solver time {seconds:.2f} s")
    assert ok


def test_c3_loss_invariants(verdict):
    gen = torch.Generator().manual_seed(3)
    drift = 0.0
    for _ in range(50):
        g = int(torch.randint(1, 5, (1,), generator=gen))
        logits = torch.randn(6, 4, generator=gen, dtype=D)
        masks = torch.rand(6, 8, 8, generator=gen, dtype=D)
        cls = torch.randint(0, 3, (g,), generator=gen)
        gt = torch.rand(g, 8, 8, generator=gen) > 0.5
        base = set_loss(logits, masks, cls, gt).total.item()
        perm = torch.randperm(g, generator=gen)
        drift = max(drift, abs(set_loss(logits, masks, cls[perm], gt[perm]).total.item() - base))

    logits = torch.randn(5, 4, dtype=D, generator=gen)
    empty = set_loss(logits, torch.rand(5, 8, 8, dtype=D), torch.zeros(0, dtype=torch.long), torch.zeros(0, 8, 8, dtype=torch.bool))
    ce = torch.nn.functional.cross_entropy(logits, torch.full((5,), 3)).item()
    g0_ok = empty.mask_term.item() == 0.0 and abs(empty.cls_term.item() - ce) < 1e-14

    gt = torch.zeros(2, 8, 8, dtype=torch.bool)
    gt[0, :4, :4] = True
    gt[1, 5:, 2:] = True
    cls = torch.tensor([1, 2])
    perfect_logits = torch.full((4, 4), -60.0, dtype=D)
    perfect_logits[0, 1] = perfect_logits[2, 2] = 60.0
    perfect_logits[1, 3] = perfect_logits[3, 3] = 60.0
    perfect_masks = torch.zeros(4, 8, 8, dtype=D)
    perfect_masks[0], perfect_masks[2] = gt[0].to(D), gt[1].to(D)
    best = set_loss(perfect_logits, perfect_masks, cls, gt)
    others = [
        set_loss(
            perfect_logits + torch.randn(4, 4, generator=gen, dtype=D),
            (perfect_masks + 0.3 * torch.rand(4, 8, 8, generator=gen, dtype=D)).clamp(0, 1),
            cls,
            gt,
        ).total.item()
        for _ in range(20)
    ]
    min_ok = best.mask_term.item() == 0.0 and best.cls_term.item() < 1e-20 and min(others) >= best.total.item()

    ok = drift <= 1e-12 and g0_ok and min_ok
    verdict("C3 loss invariants", ok, f"shuffle drift {drift:.1e}, G=0 ok={g0_ok}, perfect minimum ok={min_ok}")
    assert ok


def test_c4_deformable_attention(verdict):
    torch.manual_seed(0)
    attn = MSDeformAttn(4, heads=2, levels=1, points=1).to(D)
    with torch.no_grad():
        attn.sampling_offsets.weight.zero_()
        attn.sampling_offsets.bias.zero_()
    feat = torch.randn(1, 4, 5, 7, dtype=D)
    memory, table = flatten_pyramid([feat], [torch.zeros(4, 5, 7, dtype=D)])
    ref = torch.rand(1, 9, 2, dtype=D)
    out = attn(torch.randn(1, 9, 4, dtype=D), ref, memory, table)
    value = attn.value_proj(memory)[0].T.reshape(4, 5, 7)
    degenerate = (out[0] - attn.output_proj(bilinear_sample(value, ref[0]))).abs().max().item()

    attn = MSDeformAttn(8, heads=2, levels=4, points=4).to(D)
    with torch.no_grad():
        attn.attention_weights.weight.normal_(0, 2.0)
    sizes = (8, 4, 2, 1)
    memory, table = flatten_pyramid([torch.randn(2, 8, s, s, dtype=D) for s in sizes], [torch.zeros(8, s, s, dtype=D) for s in sizes])
    _, w = attn(torch.randn(2, 7, 8, dtype=D), torch.rand(2, 7, 2, dtype=D), memory, table, return_weights=True)
    weight_sum = (w.sum((-1, -2)) - 1).abs().max().item()

    dec = Decoder(8, num_queries=6, layers=2, heads=2, points=2, ffn=16).to(D)
    perm = torch.tensor([4, 2, 0, 5, 1, 3])
    obj, ref = dec(memory, table)
    obj_p, ref_p = dec(memory, table, dec.query_embed[perm], dec.query_pos[perm])
    equi = max((obj_p - obj[:, perm]).abs().max().item(), (ref_p - ref[:, perm]).abs().max().item())

    ok = degenerate <= 1e-12 and weight_sum <= 1e-9 and equi <= 1e-12
    verdict(
        "C4 deformable attention",
        ok,
        f"degenerate vs bilinear {degenerate:.1e}, weight-sum err {weight_sum:.1e}, decoder permutation drift {equi:.1e}",
    )
    assert ok


def test_c5_default_training(default_run, verdict):
    ap50 = default_run["report"]["AP50"]
    minutes = default_run["seconds"] / 60
    epochs = len(default_run["log"])
    ok = ap50 >= 0.5 and epochs <= 30 and minutes < 45
    verdict(
        "C5 default training",
        ok,
        f"val AP50 {ap50:.3f} (AP {default_run['report']['AP']:.3f}) after {epochs} epochs, {minutes:.1f} min on {torch.get_num_threads()} thread(s)",
    )
    assert ok


def test_c5_smoke_loss_halves(default_run, verdict):
    first, last = default_run["log"][0]["loss"], default_run["log"][-1]["loss"]
    ok = last <= 0.5 * first
    verdict("C5 smoke: training loss halves", ok, f"epoch 1 {first:.3f} -> final {last:.3f} ({1 - last / first:.0%} decrease)")
    assert ok


def test_c6_position_ablation(ablation_rows, verdict):
    v = ablate.position_verdicts(ablation_rows)
    seeds = len({r.seed for r in ablation_rows})
    means = {
        cell: np.mean([r.AP50 for r in ablation_rows if r.grid == "position" and r.cell == cell])
        for cell in (ablate.position_cell(mp, kp) for mp, kp in ablate.POSITION_CELLS)
    }
    ok = all(v.values())
    detail = ", ".join(f"{k}={x:.3f}" for k, x in means.items())
    verdict("C6 MP/KP ablation", ok, f"{seeds} seeds, mean AP50 {detail}; {v}")
    assert ok


def test_c7_resolution_ablation(ablation_rows, verdict):
    v = ablate.scale_verdicts(ablation_rows)
    rows = [r for r in ablation_rows if r.grid == "scale"]
    means = {c: np.mean([r.AP for r in rows if r.cell == c]) for c in ("1/8", "1/4", "1/2")}
    ok = all(v.values())
    detail = ", ".join(f"{k}={x:.3f}" for k, x in means.items())
    verdict("C7 resolution ablation", ok, f"mean AP {detail}; {v}")
    assert ok


def test_c8_duplicate_behaviour(default_run, verdict):
    frac = default_run["count_agreement"]
    ok = frac >= 0.8
    verdict("C8 NMS-free counts", ok, f"{frac:.1%} of val images within +-1 of the instance count")
    assert ok


def test_c9_infrastructure(default_run, tmp_path, verdict):
    cfg = default_run["cfg"]
    model = load_model(cfg, default_run["dir"] / CHECKPOINT)
    val = load_split(cfg["data.dir"], "val")
    images = val.images[:8]
    resaved = tmp_path / "again.ckpt"
    from isda.core import checkpoint

    checkpoint.save(resaved, model.state_dict())
    reloaded = load_model(cfg, resaved)
    with torch.no_grad():
        a, b = model(images), reloaded(images)
    ckpt_ok = all(torch.equal(a[k], b[k]) for k in a) and resaved.read_bytes() == (default_run["dir"] / CHECKPOINT).read_bytes()

    tiny = ["--set", "input.size=32", "--set", "data.train_count=6", "--set", "data.val_count=2", "--set", "train.epochs=2",
            "--set", "train.lr_drop_epochs=1", "--set", "train.batch_size=2", "--seed", "7"]
    for name in ("a", "b"):
        assert cli.main(["train", "--out", str(tmp_path / name), "--set", f"data.dir={tmp_path / name / 'data'}", *tiny]) == 0
    files = ["model.ckpt", "data/train.json", "data/val.json", "data/train/000003.pgm"]
    repro_ok = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    logs = [[{k: v for k, v in json.loads(l).items() if k != "seconds"} for l in (tmp_path / n / TRAIN_LOG).read_text().splitlines()] for n in "ab"]
    repro_ok &= logs[0] == logs[1]

    rng = np.random.default_rng(9)
    rle_fail = 0
    for _ in range(1000):
        h, w = rng.integers(1, 65, size=2)
        m = rng.random((h, w)) < rng.random()
        rle_fail += not np.array_equal(rle_decode(rle_encode(m), (h, w)), m)

    ap_err = 0.0
    for seed in range(5):
        pred, gt = micro_benchmark(seed)
        rep = evaluate(pred, gt).as_dict()
        ap_err = max(ap_err, max(abs(rep[k] - v) for k, v in oracle(pred, gt).items()))

    ok = ckpt_ok and repro_ok and rle_fail == 0 and ap_err <= 1e-9
    verdict(
        "C9 infrastructure",
        ok,
        f"checkpoint bit-exact={ckpt_ok}, seeded reproducible={repro_ok}, RLE failures {rle_fail}/1000, AP vs oracle {ap_err:.1e}",
    )
    assert ok
