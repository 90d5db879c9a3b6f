"""Acceptance suite: one printed PASS/FAIL line per criterion.

Criteria 7-10 train real models and take tens of minutes on one core;
they carry the ``slow`` marker (deselect with ``-m "not slow"``).
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import network_gradcheck
from sartol import pipeline as P
from sartol.autonet.checkpoint import encode_checkpoint
from sartol.autonet.loss import weighted_mse
from sartol.autonet.model import LayerSpec, ModelSpec, mini_fcn, mini_res_unet
from sartol.autonet.train import TrainConfig, train
from sartol.dataset import patch_count, split_area
from sartol.errors import DataError
from sartol.eval import ConfusionCounts, binarize, confusion, iou_from_pr, metrics
from sartol.groundtruth import make_tolerant, squared_distance_transform
from sartol.synthscene import SceneConfig, generate_dataset

DATA = Path(__file__).parent / "data"


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def random_masks(n, seed, size=64):
    """Masks of varied density, always including an empty and a full one."""
    rs = np.random.default_rng(seed)
    masks = [np.zeros((size, size), bool), np.ones((size, size), bool)]
    one = np.zeros((size, size), bool)
    one[rs.integers(size), rs.integers(size)] = True
    masks.append(one)
    while len(masks) < n:
        density = rs.choice([0.001, 0.01, 0.05, 0.2, 0.6])
        masks.append(rs.random((size, size)) < density)
    return masks


def brute_sq_dist(mask):
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    if len(ys) == 0:
        return np.full((h, w), -1, dtype=np.int64)
    rr, cc = np.indices((h, w)).reshape(2, -1, 1)
    return ((rr - ys) ** 2 + (cc - xs) ** 2).min(axis=1).reshape(h, w)


# ---------------------------------------------------------------------------
# 1-6: exact property suites
# ---------------------------------------------------------------------------


def test_criterion_1_tolerant_gt_exact(report):
    start = time.perf_counter()
    masks = random_masks(100, seed=1)
    bad = 0
    for mask in masks:
        d2 = brute_sq_dist(mask).ravel().tolist()
        for t_max in (0, 1, 2, 4, 8):
            got = make_tolerant(mask, t_max).y_tol.ravel().tolist()
            want = [1.0 - math.sqrt(d) / (t_max + 1) if 0 <= d <= t_max * t_max else 0.0 for d in d2]
            bad += got != want
            if t_max == 0:
                bad += got != mask.astype(float).ravel().tolist()
    elapsed = time.perf_counter() - start
    report(1, "tolerant GT bit-exact vs brute-force EDT", bad == 0 and elapsed < 30,
           f"{len(masks)} masks x 5 t_max, {bad} mismatches, {elapsed:.1f}s")


def test_criterion_2_edt_exact(report):
    start = time.perf_counter()
    masks = random_masks(120, seed=2)
    bad = sum(not np.array_equal(squared_distance_transform(m), brute_sq_dist(m)) for m in masks)
    elapsed = time.perf_counter() - start
    report(2, "EDT equals brute force (squared integers)", bad == 0 and elapsed < 60,
           f"{len(masks)} masks incl. empty/full, {bad} mismatches, {elapsed:.1f}s")


def isolated_specs():
    """One small graph per layer kind, each fed by a trainable conv."""
    def conv(name, src, ch=4, stride=1):
        return LayerSpec(name, "conv", (src,), {"k": 3, "out_ch": ch, "stride": stride})

    head = LayerSpec("head", "sigmoid_head", ("x",))
    return {
        "conv": ModelSpec("conv", (conv("c", "input"), conv("x", "c", stride=1), head)),
        "conv_stride2": ModelSpec("conv_s2", (conv("c", "input", stride=2),
                                              LayerSpec("x", "transposed_conv", ("c",), {"out_ch": 3}), head)),
        "batch_norm": ModelSpec("bn", (conv("c", "input"), LayerSpec("x", "batch_norm", ("c",)), head)),
        "relu": ModelSpec("relu", (conv("c", "input"), LayerSpec("x", "relu", ("c",)), head)),
        "maxpool": ModelSpec("pool", (conv("c", "input"), LayerSpec("p", "maxpool", ("c",)),
                                      LayerSpec("x", "transposed_conv", ("p",), {"out_ch": 2}), head)),
        "transposed_conv": ModelSpec("tconv", (conv("c", "input", stride=2),
                                               LayerSpec("x", "transposed_conv", ("c",), {"out_ch": 5}), head)),
        "skip_fuse_add": ModelSpec("fuse_add", (conv("a", "input"), conv("b", "input", ch=3),
                                                LayerSpec("x", "skip_fuse", ("a", "b"), {"mode": "add_after_1x1"}),
                                                head)),
        "skip_fuse_concat": ModelSpec("fuse_cat", (conv("a", "input"), conv("b", "input", ch=3),
                                                   LayerSpec("x", "skip_fuse", ("a", "b"), {"mode": "concat"}),
                                                   head)),
        "add": ModelSpec("add", (conv("a", "input"), conv("b", "input"), LayerSpec("x", "add", ("a", "b")), head)),
        "sigmoid_head": ModelSpec("head", (LayerSpec("x", "conv", ("input",), {"k": 1, "out_ch": 2, "stride": 1}),
                                           head)),
    }


def test_criterion_3_gradient_checks(report):
    start = time.perf_counter()
    specs = dict(isolated_specs(), MiniFCN=mini_fcn(), MiniResUNet=mini_res_unet())
    worst = {}
    for name, spec in specs.items():
        worst[name] = max(network_gradcheck(spec, seed) for seed in range(10))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 300
    report(3, "gradient checks (10 layer graphs + 2 nets, 10 seeds)", ok,
           f"worst rel err {worst[top]:.2e} in {top}, {elapsed:.1f}s")


def test_criterion_4_loss_semantics(report):
    rs = np.random.default_rng(4)
    shape = (2, 1, 32, 32)
    y_bin = rs.random(shape) < 0.1
    y_tol = np.where(y_bin, 1.0, rs.random(shape) * 0.6)
    valid = rs.random(shape) < 0.85
    pred = rs.random(shape)
    plain = float(np.mean((pred[valid] - y_tol[valid]) ** 2))
    checks = [abs(weighted_mse(pred, y_tol, y_bin, valid, 1.0) - plain) < 1e-12]
    bg_only = np.where(y_bin, y_tol, pred)
    base = weighted_mse(bg_only, y_tol, y_bin, valid, 1.0)
    checks += [weighted_mse(bg_only, y_tol, y_bin, valid, lam) == base for lam in (2.0, 4.0, 8.0)]
    road_only = np.where(y_bin, pred, y_tol)
    base = weighted_mse(road_only, y_tol, y_bin, valid, 1.0)
    checks += [abs(weighted_mse(road_only, y_tol, y_bin, valid, lam) / base / lam - 1) < 1e-9
               for lam in (2.0, 4.0, 8.0, 13.5)]
    try:
        weighted_mse(pred, y_tol, y_bin, np.zeros(shape, bool), 2.0)
        checks.append(False)
    except DataError:
        checks.append(True)
    report(4, "loss semantics", all(checks), f"{sum(checks)}/{len(checks)} sub-checks")


def test_criterion_5_metric_identities(report):
    rs = np.random.default_rng(5)
    quads = rs.integers(0, 10**7, size=(10_000, 4))
    quads[:, 0] += 1
    worst = 0.0
    bounded = True
    for tp, fp, fn, tn in quads.tolist():
        r = metrics(ConfusionCounts(tp, fp, fn, tn))
        worst = max(worst, abs(r.iou - iou_from_pr(r.precision, r.recall)))
        bounded &= r.iou <= min(r.precision, r.recall)
    row = 100 * iou_from_pr(0.7169, 0.5294)
    ok = worst < 1e-12 and bounded and abs(row - 43.79) < 0.01
    report(5, "IoU/precision/recall identities", ok, f"max deviation {worst:.1e}, reference row IoU {row:.3f}%")


def test_criterion_6_patch_count(report):
    start = time.perf_counter()
    n = patch_count(16384, 12288, 256, 256, "rotations")
    elapsed = time.perf_counter() - start
    report(6, "epoch patch count", n == 12288 and elapsed < 1, f"{n} patches, {elapsed * 1e3:.2f} ms")


# ---------------------------------------------------------------------------
# 7-10: training runs through the CLI
# ---------------------------------------------------------------------------
#
# Every run config lives in tests/data; calibration.json records what the
# one-off calibration runs measured when the thresholds were frozen.

CALIBRATION = json.loads((DATA / "calibration.json").read_text()) if (DATA / "calibration.json").exists() else {}


def cli(workdir, command, config_name, *overrides):
    from sartol.cli import main

    args = [command, "--config", str(workdir / config_name)]
    for o in overrides:
        args += ["--override", o]
    return main(args)


def execute_runs(workdir: Path) -> dict:
    """Run the criterion 7-9 experiments under ``workdir``; returns timings."""
    workdir.mkdir(parents=True, exist_ok=True)
    for name in ("criterion7.json", "criterion8_tolerance.json", "criterion8_weight.json", "criterion9.json"):
        (workdir / name).write_bytes((DATA / name).read_bytes())
    timings = {}
    start = time.perf_counter()
    assert cli(workdir, "synth", "criterion7.json", "paths.out=c7/scenes") == 0
    assert cli(workdir, "sweep", "criterion7.json") == 0
    timings[7] = time.perf_counter() - start
    start = time.perf_counter()
    assert cli(workdir, "synth", "criterion8_tolerance.json", "paths.out=c8/scenes") == 0
    assert cli(workdir, "sweep", "criterion8_tolerance.json") == 0
    assert cli(workdir, "sweep", "criterion8_weight.json") == 0
    timings[8] = time.perf_counter() - start
    start = time.perf_counter()
    overfit_run(workdir / "c9", json.loads((DATA / "criterion9.json").read_text()))
    timings[9] = time.perf_counter() - start
    return timings


def overfit_run(out: Path, cfg: dict) -> None:
    """Train on one fixed batch; writes history.csv, model.ckpt and steps.csv."""
    out.mkdir(parents=True, exist_ok=True)
    s = cfg["scene"]
    generate_dataset(SceneConfig(**s), 1, out / "scene")
    scenes = P.load_scenes(out / "scene" / "manifest.txt")
    frac = cfg["split_fraction"]
    stats = P.training_stats(scenes, frac)
    patches = P.build_patches(scenes, stats, cfg["t_max"], frac, cfg["patch_size"], cfg["patch_size"], "none")
    # the most road-dense patches, kept in scene order
    density = patches.y_bin.mean(axis=(1, 2))
    pick = np.sort(np.argsort(-density, kind="stable")[: cfg["batch_size"]])
    batch = patches.subset(pick)
    config = TrainConfig(learning_rate=cfg["learning_rate"], lr_decay=1.0, epochs=cfg["steps"],
                         batch_size=cfg["batch_size"], t_max=cfg["t_max"], lam=cfg["lambda"], seed=cfg["seed"])
    spec = mini_fcn()
    params, history = train(spec, batch, config)
    (out / "history.csv").write_text(history.to_csv())
    (out / "steps.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history.step_loss)))
    (out / "model.ckpt").write_bytes(encode_checkpoint(spec, params, {"train": config.to_dict()}))


def sweep_rows(path: Path) -> dict:
    from sartol.eval import parse_sweep

    return {(int(r[2]), float(r[3])): r for r in parse_sweep(path.read_text())}


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("acceptance") / "first"
    return workdir, execute_runs(workdir)


def target_oracle_iou(manifest: Path, t_max: int, split: float) -> float:
    """Held-out IoU of the tolerant target itself, binarized at 0.5."""
    total = ConfusionCounts(0, 0, 0, 0)
    for s in P.load_scenes(manifest):
        cut = split_area(*s.shape, split).test_region.row0
        y_tol = make_tolerant(s.y_bin, t_max, s.valid).y_tol
        total = total + confusion(binarize(y_tol[cut:]), s.y_bin[cut:], s.valid[cut:])
    return metrics(total).iou


@pytest.mark.slow
def test_criterion_7_end_to_end(runs, report):
    workdir, timings = runs
    (row,) = sweep_rows(workdir / "c7" / "sweep.csv").values()
    iou = float(row[4]) / 100
    threshold = CALIBRATION["criterion7"]["iou_threshold"]
    ceiling = target_oracle_iou(workdir / "c7" / "scenes" / "manifest.txt", t_max=4, split=0.8)
    report(7, "desk-scale MiniFCN t_max=4 lambda=2, held-out IoU", iou >= threshold,
           f"IoU {iou:.4f} vs frozen {threshold} (target itself scores {ceiling:.4f}), "
           f"P {row[5]}%, R {row[6]}%, {timings[7] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_directional_trends(runs, report):
    workdir, _ = runs
    tol = sweep_rows(workdir / "c8_tolerance" / "sweep.csv")
    lam = sweep_rows(workdir / "c8_weight" / "sweep.csv")
    rec = [float(tol[(t, 1.0)][6]) for t in (0, 2, 8)]
    prec = [float(tol[(t, 1.0)][5]) for t in (0, 2, 8)]
    r1, r8 = float(lam[(4, 1.0)][6]), float(lam[(4, 8.0)][6])
    p1, p8 = float(lam[(4, 1.0)][5]), float(lam[(4, 8.0)][5])
    ok = (rec[0] <= rec[1] <= rec[2] and prec[0] >= prec[1] >= prec[2] and r8 > r1 and p8 < p1)
    report(8, "recall/precision trends over t_max and lambda", ok,
           f"t_max 0/2/8: R {rec} P {prec}; lambda 1/8 at t_max 4: R {r1}/{r8} P {p1}/{p8}")


@pytest.mark.slow
def test_criterion_9_overfit(runs, report):
    workdir, _ = runs
    lines = (workdir / "c9" / "steps.csv").read_text().splitlines()[1:]
    losses = [float(l.split(",")[1]) for l in lines]
    below = [i for i, v in enumerate(losses) if v < 1e-3 * losses[0]]
    report(9, "single-batch overfit", len(losses) <= 500 and bool(below),
           f"initial {losses[0]:.4g}, min ratio {min(losses) / losses[0]:.2e}, "
           f"first below 1e-3 at step {below[0] if below else None}")


def artifact_digests(workdir: Path) -> dict:
    keep = (".csv", ".ckpt", ".json", ".txt", ".pgm")
    return {p.relative_to(workdir).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(workdir.rglob("*")) if p.is_file() and p.suffix in keep}


@pytest.mark.slow
def test_criterion_10_determinism(runs, tmp_path, report):
    first, _ = runs
    second = tmp_path / "second"
    execute_runs(second)
    a, b = artifact_digests(first), artifact_digests(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {k.rsplit(".", 1)[1] for k in a}
    ok = not differing and {"csv", "ckpt"} <= kinds
    report(10, "repeated runs are byte-identical", ok,
           f"{len(a)} artifacts compared" + (f", differing: {differing[:5]}" if differing else ""))
