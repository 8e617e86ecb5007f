"""Acceptance gate: one test per criterion, each reporting a pass/fail line.

The lines are printed in the terminal summary under "acceptance criteria".
"""

import json
import time

import numpy as np
import pytest
from scipy.special import expit

import conftest
from mvtt import tensor_core as tc
from mvtt.cli import main as cli_main
from mvtt.gradcheck import TOLERANCE, convlstm_check, model_check, op_checks
from mvtt.metrics_eval import bland_altman, confusion, metrics, pearson, scar_burden
from mvtt.mvtt_net import MvttConfig, MvttNet, attention_apply, dice_loss, fuse, hybrid_loss, infer
from mvtt.phantom import PhantomSpec, generate_phantom, phantom_series
from mvtt.recurrent import ConvLstmState, convlstm_step
from mvtt.tensor_core import ConvSpec, Tensor
from mvtt.trainer import Sample, TrainConfig, lr_schedule, make_folds, train
from mvtt.volume import (Volume, coronal_to_axial, normalize, read_volume, reslice, sagittal_to_axial,
                         write_volume)
from test_metrics_eval import loop_confusion
from test_recurrent import random_params, scalar_lstm, zero_params
from test_tensor_core import conv_oracle

# desk-scale training regime shared by criteria 5, 6 and 9
TRAIN_SEED = 42
HELDOUT_SEED = 7
TRAIN_COUNT = 4
HELDOUT_COUNT = 20
MODEL = MvttConfig(slice_shape=(32, 32), width_multiplier="1/4", seed=0)
REGIME = TrainConfig(initial_lr=0.01, lr_decay_rate=0.98, max_epochs=100, seed=0)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


def _samples(specs):
    out = []
    for n, spec in enumerate(specs):
        ph = generate_phantom(spec)
        out.append((Sample(f"p{n}", normalize(ph.intensity).values, ph.anatomy.values, ph.scar.values), ph))
    return out


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    data = _samples(phantom_series(TRAIN_COUNT, seed=TRAIN_SEED))
    t0 = time.perf_counter()
    res = train([s for s, _ in data], [], REGIME, MODEL, out_dir=out)
    seconds = time.perf_counter() - t0
    return {"model": res.model, "data": data, "seconds": seconds, "epochs": len(res.log), "dir": out}


# ----------------------------------------------------------------------------

def test_criterion_1_gradcheck_suite():
    t0 = time.perf_counter()
    results = op_checks(seed=0) + [convlstm_check(seed=0), model_check(seed=0)]
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.max_rel_error < TOLERANCE for r in results) and seconds < 120
    record(1, ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e} < 1e-4, {seconds:.1f}s < 120s")
    assert ok, [(r.name, r.max_rel_error) for r in results]


def test_criterion_2_equation_identities():
    rng = np.random.default_rng(2)
    failures = []
    # fusion: integer-valued tensors keep every sum exact, so equality is bitwise
    Z, C, Y, X = 3, 2, 4, 5
    F_a, d = rng.integers(-50, 50, (Z, C, Y, X)).astype(float), rng.integers(-50, 50, (Z, C, Y, X)).astype(float)
    F_s, F_c = rng.integers(-50, 50, (X, C, Y, Z)).astype(float), rng.integers(-50, 50, (Y, C, X, Z)).astype(float)
    zero = fuse(Tensor(F_a), Tensor(np.zeros_like(F_s)), Tensor(np.zeros_like(F_c))).data
    if zero.tobytes() != F_a.tobytes():
        failures.append("fusion zero-branch identity")
    lhs = fuse(Tensor(F_a + d), Tensor(F_s), Tensor(F_c)).data
    rhs = fuse(Tensor(F_a), Tensor(F_s), Tensor(F_c)).data + d
    if lhs.tobytes() != rhs.tobytes():
        failures.append("fusion additivity")

    model = MvttNet(MvttConfig(slice_shape=(8, 8), width_multiplier="1/8", seed=2))
    for _ in range(20):
        am = model.attention_mask(Tensor(rng.normal(scale=3, size=(3, 1, 8, 8)))).data
        if not np.all((am > 0) & (am < 1)):
            failures.append("attention mask range")
            break
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, size=4))
        am = expit(rng.normal(scale=4, size=shape))
        F_v = np.abs(rng.normal(scale=rng.uniform(0.1, 10), size=shape))
        out = attention_apply(Tensor(am), Tensor(F_v)).data
        if not (np.all(F_v <= out) and np.all(out <= 2 * F_v)):
            failures.append("attention bound")
            break

    g_l = (rng.uniform(size=(4, 8, 8)) < 0.5).astype(float)
    g_as = np.zeros((4, 8, 8))
    g_as[1, 2:4, 2:4] = 1
    wrong = np.zeros_like(g_as)
    wrong[3, 5:, 5:] = 1
    perfect = hybrid_loss(Tensor(g_l), g_l, Tensor(g_as), g_as).item()
    disjoint = hybrid_loss(Tensor(g_l), g_l, Tensor(wrong), g_as).item()
    losses = [perfect, disjoint]
    for _ in range(200):
        losses.append(hybrid_loss(Tensor(rng.uniform(size=g_l.shape)), g_l,
                                  Tensor(rng.uniform(size=g_l.shape)), g_as).item())
    if not all(0 <= v <= 2 for v in losses):
        failures.append("hybrid loss range")
    if not (perfect < 1e-5 and abs(disjoint - 1) < 1e-5):
        failures.append("hybrid loss reference cases")
    record(2, not failures, f"fusion bitwise, mask in (0,1), 1000 bound instances, loss perfect {perfect:.1e} "
                            f"disjoint {disjoint:.6f}" + (f" failures={failures}" if failures else ""))
    assert not failures


def test_criterion_3_convlstm_closed_forms():
    failures = []
    p = zero_params(2, 3, (4, 4))
    state, gates = convlstm_step(Tensor(np.random.default_rng(0).normal(size=(1, 2, 4, 4))),
                                 ConvLstmState.zeros(3, (4, 4)), p, return_gates=True)
    if not (all(np.all(gates[g].data == 0.5) for g in "fio") and np.all(state.h.data == 0) and
            np.all(state.c.data == 0)):
        failures.append("zero-parameter case")
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sp = random_params(rng, cin=1, hidden=1, spatial=(1, 1), k=1, scale=1.0)
        w = {n: float(t.data.reshape(-1)[0]) for n, t in sp.named()}
        x, h0, c0 = rng.normal(), rng.uniform(0, 1), rng.uniform(0, 2)
        s = convlstm_step(Tensor([[[[x]]]]), ConvLstmState(Tensor([[[[h0]]]]), Tensor([[[[c0]]]])), sp)
        h_ref, c_ref = scalar_lstm(x, h0, c0, w)
        worst = max(worst, abs(s.h.item() - h_ref), abs(s.c.item() - c_ref))
    if worst >= 1e-12:
        failures.append("scalar oracle")
    rng = np.random.default_rng(3)
    rp = random_params(rng, scale=1.5)
    for _ in range(1000):
        prev = ConvLstmState(Tensor(rng.uniform(0, 2, size=(1, 3, 5, 5))), Tensor(rng.uniform(0, 2, size=(1, 3, 5, 5))))
        s = convlstm_step(Tensor(rng.normal(scale=2, size=(1, 2, 5, 5))), prev, rp)
        if np.any(s.c.data < 0) or np.any(s.h.data < 0):
            failures.append("positivity")
            break
    record(3, not failures, f"zero-param exact, scalar oracle max err {worst:.1e} < 1e-12, 1000 positive steps"
           + (f" failures={failures}" if failures else ""))
    assert not failures


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4)
    conv_err = 0.0
    for d in (1, 2, 5):
        for padding in ("same", "valid"):
            h = w = 2 * d + 5
            x, wt, b = rng.normal(size=(2, 2, h, w)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
            spec = ConvSpec((3, 3), 2, 3, dilation=d, padding=padding)
            conv_err = max(conv_err, float(np.abs(tc.conv2d(Tensor(x), Tensor(wt), Tensor(b), spec).data
                                                  - conv_oracle(x, wt, b, spec)).max()))
    confusion_ok = True
    for _ in range(100):
        shape = tuple(rng.integers(1, 17, size=3))
        p = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
        g = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
        confusion_ok &= confusion(p, g) == loop_confusion(p, g)
    reslice_ok = True
    for _ in range(50):
        v = rng.normal(size=tuple(rng.integers(1, 17, size=3)))
        views = reslice(v)
        reslice_ok &= (sagittal_to_axial(views.sagittal).tobytes() == v.tobytes()
                       and coronal_to_axial(views.coronal).tobytes() == v.tobytes())
    ok = conv_err <= 1e-12 and confusion_ok and reslice_ok
    record(4, ok, f"conv max err {conv_err:.1e} <= 1e-12 over d in (1,2,5) x (same,valid), "
                  f"confusion exact on 100 pairs: {confusion_ok}, reslice bitwise: {reslice_ok}")
    assert ok


def test_criterion_5_phantom_overfit(overfit):
    dices = []
    for s, _ in overfit["data"]:
        pair = infer(s.image, overfit["model"])
        dices.append((metrics(confusion(pair.anatomy_mask, s.anatomy)).di,
                      metrics(confusion(pair.scar_mask, s.scar)).di))
    min_anat = min(a for a, _ in dices)
    min_scar = min(c for _, c in dices)
    ok = (min_anat >= 0.95 and min_scar >= 0.85 and overfit["epochs"] <= 300
          and overfit["seconds"] <= 1800)
    record(5, ok, f"min anatomy Dice {min_anat:.4f} >= 0.95, min scar Dice {min_scar:.4f} >= 0.85, "
                  f"{overfit['epochs']} epochs, {overfit['seconds']:.0f}s <= 1800s")
    assert ok, dices


def test_criterion_6_quantification_agreement(overfit):
    truth, est = [], []
    for s, ph in _samples(phantom_series(HELDOUT_COUNT, seed=HELDOUT_SEED)):
        pair = infer(s.image, overfit["model"])
        sp = ph.anatomy.spacing_mm
        truth.append(ph.scar_burden_pct)
        est.append(scar_burden(Volume(pair.scar_mask, sp, "label"), Volume(pair.anatomy_mask, sp, "label")).percentage)
    r = pearson(truth, est)
    ba = bland_altman(truth, est)
    ok = r >= 0.99 and abs(ba.bias) <= 1.0
    record(6, ok, f"{HELDOUT_COUNT} held-out phantoms: r {r:.4f} >= 0.99, bias {ba.bias:+.3f} pp (|bias| <= 1), "
                  f"limits [{ba.loa_low:.2f}, {ba.loa_high:.2f}]")
    assert ok, list(zip(truth, est))


def test_criterion_7_schedule_and_splits():
    lr1 = lr_schedule(1, TrainConfig(initial_lr=0.001, lr_decay_rate=0.98))
    sizes = [len(f) for f in make_folds([f"scan{i:03d}" for i in range(170)], 10, seed=0).folds()]
    ok = abs(lr1 - 0.00098) < 1e-15 and sizes == [17] * 10
    record(7, ok, f"lr(1) = {lr1:.8g}, fold sizes {sorted(set(sizes))} x {len(sizes)}")
    assert ok


def _cli_pipeline(root):
    ph, tr, inf = root / "ph", root / "tr", root / "inf"
    assert cli_main(["phantom", "--count", "2", "--dims", "4x16x16", "--spacing", "3x1x1", "--seed", "8",
                     "--deterministic", "--out", str(ph)]) == 0
    assert cli_main(["train", "--data", str(ph), "--epochs", "2", "--width", "1/8", "--seed", "8",
                     "--deterministic", "--out", str(tr)]) == 0
    assert cli_main(["infer", "--checkpoint", str(tr / "model.ckpt"), "--volumes", str(ph),
                     "--deterministic", "--out", str(inf)]) == 0
    return ph, tr, inf


def _log_without_timing(path):
    return [{k: v for k, v in json.loads(line).items() if k != "seconds"} for line in path.read_text().splitlines()]


def test_criterion_8_determinism(tmp_path):
    a = _cli_pipeline(tmp_path / "a")
    b = _cli_pipeline(tmp_path / "b")
    mismatches = []
    for da, db in ((a[0], b[0]), (a[2], b[2])):
        for f in sorted(da.glob("*.vraw")):
            if f.read_bytes() != (db / f.name).read_bytes():
                mismatches.append(f.name)
    if (a[1] / "model.ckpt").read_bytes() != (b[1] / "model.ckpt").read_bytes():
        mismatches.append("model.ckpt")
    if _log_without_timing(a[1] / "train_log.jsonl") != _log_without_timing(b[1] / "train_log.jsonl"):
        mismatches.append("train_log.jsonl")
    n_files = len(list(a[0].glob("*.vraw"))) + len(list(a[2].glob("*.vraw"))) + 2
    record(8, not mismatches, f"{n_files} artifacts compared across two --deterministic runs"
           + (f", mismatches {mismatches}" if mismatches else ", all bitwise equal"))
    assert not mismatches


def test_criterion_9_timing_report(overfit, tmp_path):
    spec = PhantomSpec(dims=(60, 32, 32), seed=9)
    ph = generate_phantom(spec)
    write_volume(ph.intensity, tmp_path / "case60")
    code = cli_main(["infer", "--checkpoint", str(overfit["dir"] / "model.ckpt"), "--volume",
                     str(tmp_path / "case60.vjson"), "--out", str(tmp_path / "out")])
    cases = json.loads((tmp_path / "out" / "manifest.json").read_text())["results"]["cases"] if code == 0 else []
    ok = code == 0 and len(cases) == 1 and cases[0]["seconds"] > 0
    secs = cases[0]["seconds"] if cases else float("nan")
    out_dims = read_volume(tmp_path / "out" / "case60_scar").dims if ok else None
    record(9, ok, f"60-slice volume (C=4, 32x32) inferred in {secs:.2f}s, output dims {out_dims} "
                  f"(non-binding; the published ~0.27 s is hardware-specific)")
    assert ok
