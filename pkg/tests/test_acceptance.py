"""Acceptance checks, one test per criterion.

Each test prints a PASS or FAIL line at the end of the module.  The two
trend checks need a detector pretrained on the seed-7 benchmark; it is
built once and cached under ``.pytest_cache`` keyed by a digest of the
package sources, so later runs only pay for the adaptation sweeps.
"""
import csv
import hashlib
import itertools
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import eadk
from eadk import autodiff as ad
from eadk import checkpoint, cli, train
from eadk.cli import main
from eadk.detector import DetectorConfig, forward, init_embedding_table, init_weights
from eadk.evaluation import evaluate
from eadk.geometry import box_losses, giou, iou
from eadk.losses import total_loss
from eadk.matching import build_cost_matrix, hungarian

from test_evaluation import random_scenes, reference_map

RESULTS = {}
NAMES = {
    1: "gradient oracle",
    2: "matching oracle",
    3: "GIoU suite",
    4: "mAP oracle",
    5: "freeze invariant",
    6: "shot trend",
    7: "embeddings-per-class plateau",
    8: "determinism",
    9: "adapt recipe defaults",
}


@pytest.fixture(scope="module", autouse=True)
def report(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    write = tr.write_line if tr else print
    write("")
    for n, name in NAMES.items():
        if n not in RESULTS:
            write(f"NOT RUN criterion {n} ({name})")
            continue
        ok, detail = RESULTS[n]
        write(f"{'PASS' if ok else 'FAIL'} criterion {n} ({name}): {detail}")


@contextmanager
def criterion(n, budget=None):
    """Record PASS/FAIL for criterion ``n``; ``info`` collects the detail text."""
    info = {}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        RESULTS[n] = (False, f"{info.get('detail', '')} {type(exc).__name__}: {exc}".strip())
        raise
    elapsed = time.perf_counter() - start
    detail = f"{info.get('detail', '')} [{elapsed:.1f}s]".strip()
    if budget is not None and elapsed > budget:
        RESULTS[n] = (False, f"{detail} exceeds {budget}s")
        pytest.fail(f"criterion {n} took {elapsed:.1f}s, budget {budget}s")
    RESULTS[n] = (True, detail)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- 1 ------------------------------------------------------------------------------
def test_1_gradient_oracle():
    with criterion(1, budget=10) as info:
        cfg = DetectorConfig(image_size=16, patch_size=8, model_dim=8, enhancer_layers=1, decoder_layers=1,
                             heads=2, num_queries=4, ffn_dim=16)
        w = init_weights(cfg, seed=11).freeze()
        table = init_embedding_table(2, 2, 8, seed=4, sigma=0.5)
        img = np.random.default_rng(11).random((16, 16, 3))
        gts = np.array([[0.3, 0.3, 0.3, 0.2], [0.7, 0.6, 0.2, 0.4]])
        classes = np.array([0, 1])
        with ad.no_grad():
            out = forward(img, table, w)
        a = hungarian(build_cost_matrix(out.probs.data[0], out.boxes.data[0], gts, classes, table.layout))

        def loss(W):
            o = forward(img, type(table)(W, table.layout), w)
            return total_loss(o.probs[0], o.boxes[0], gts, classes, a, table.layout).total

        err = ad.grad_check(loss, table.W.data)
        info["detail"] = f"max relative error {err:.2e}"
        assert err < 1e-4


# -- 2 ------------------------------------------------------------------------------
def exhaustive_min(cost):
    n, m = cost.shape
    best = None
    for rows_ in itertools.permutations(range(n), m):
        total = sum(cost[r, j] for j, r in enumerate(rows_))
        best = total if best is None else min(best, total)
    return best


def test_2_matching_oracle():
    with criterion(2, budget=5) as info:
        rng = np.random.default_rng(2024)
        for _ in range(100):
            m = int(rng.integers(1, 8))
            n = int(rng.integers(m, 8))
            cost = rng.random((n, m)) * 10
            a = hungarian(cost)
            # sum in the same column order as the enumeration so equality is exact
            got = sum(cost[r, j] for j, r in sorted(zip(a.gt_idx.tolist(), a.pred_idx.tolist())))
            assert got == exhaustive_min(cost)
        info["detail"] = "100 matrices exact"


# -- 3 ------------------------------------------------------------------------------
def test_3_giou_suite():
    with criterion(3, budget=5) as info:
        assert giou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
        assert giou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0
        assert abs(giou([0, 0, 2, 2], [1, 1, 3, 3]) - (-0.079365)) < 1e-6
        rng = np.random.default_rng(3)
        for _ in range(1000):
            a = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
            b = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
            g = giou(a, b)
            assert g == giou(b, a)
            assert g <= iou(a, b) + 1e-15
            assert -1.0 < g <= 1.0
        worst = 0.0
        for _ in range(10):
            pred = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
            gt = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))], axis=1)
            worst = max(worst, ad.grad_check(lambda t: box_losses(t, gt)[1].sum(), pred))
        info["detail"] = f"giou_loss grad error {worst:.2e}"
        assert worst < 1e-5


# -- 4 ------------------------------------------------------------------------------
def test_4_map_oracle():
    with criterion(4, budget=10) as info:
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            dets, gts = random_scenes(rng, int(rng.integers(1, 4)))
            s = evaluate(dets, gts, 2)
            ref = reference_map(dets, gts, 2)
            worst = max(worst, abs(s.map_5095 - ref[0]), abs(s.map_50 - ref[1]), abs(s.map_75 - ref[2]))
        hand = evaluate([[(0, 0.9, np.array([0.0, 0.0, 10.0, 6.0]))]],
                        [(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))], 1)
        info["detail"] = f"max deviation {worst:.1e}; hand case {hand.map_5095:.3f}/{hand.map_50:.1f}/{hand.map_75:.1f}"
        assert worst < 1e-9
        assert abs(hand.map_5095 - 0.3) < 1e-12 and hand.map_50 == 1.0 and hand.map_75 == 0.0


# -- shared fixtures ------------------------------------------------------------------
SMALL = ["--model-dim", "16", "--enhancer-layers", "1", "--decoder-layers", "1", "--heads", "2",
         "--num-queries", "8", "--ffn-dim", "32"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A small benchmark and a briefly pretrained small model for the quick checks."""
    root = tmp_path_factory.mktemp("small")
    assert main(["gen-data", "--out", str(root / "data"), "--scenes", "12", "--eval-scenes", "6"]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--out", str(root / "pre"), "--iters", "5",
                 "--batch", "2"] + SMALL) == 0
    return root


def source_digest():
    h = hashlib.sha256()
    for p in sorted(Path(eadk.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="module")
def pretrained(request):
    """Seed-7 benchmark plus a detector pretrained with the default recipe (cached)."""
    root = request.config.cache.mkdir("eadk-acceptance") / source_digest()
    model = root / "pre" / "model.eadk"
    if not model.exists():
        shutil.rmtree(root, ignore_errors=True)
        start = time.perf_counter()
        assert main(["gen-data", "--out", str(root / "data"), "--seed", "7"]) == 0
        assert main(["pretrain", "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
        (root / "build_seconds").write_text(f"{time.perf_counter() - start:.1f}\n")
    return root


# -- 5 ------------------------------------------------------------------------------
def test_5_freeze_invariant(small_run, tmp_path, monkeypatch):
    with criterion(5, budget=120) as info:
        path = small_run / "pre" / "model.eadk"
        before = path.read_bytes()
        seen = []
        real_load = checkpoint.load_weights

        def spy(p):
            w = real_load(p)
            seen.append(w)
            return w

        monkeypatch.setattr(cli.checkpoint, "load_weights", spy)
        assert main(["adapt", "--model", str(path), "--data", str(small_run / "data"), "--out", str(tmp_path),
                     "--shots", "2", "--runs", "2", "--iters", "5"]) == 0
        assert len(seen) == 1
        reference = real_load(path)
        names = sorted(reference.params)
        same = [np.array_equal(seen[0][k].data, reference[k].data) and
                seen[0][k].data.tobytes() == reference[k].data.tobytes() for k in names]
        info["detail"] = f"{sum(same)}/{len(names)} tensors bit-identical"
        assert all(same)
        assert path.read_bytes() == before


# -- 6 ------------------------------------------------------------------------------
@pytest.mark.slow
def test_6_shot_trend(pretrained, tmp_path):
    build = float((pretrained / "build_seconds").read_text())
    # the budget covers building the benchmark and pretraining as well
    with criterion(6, budget=30 * 60 - build) as info:
        model, data = pretrained / "pre" / "model.eadk", pretrained / "data"
        assert main(["sweep", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "sweep"),
                     "--shots", "1,4,16", "--runs", "5"]) == 0
        means = {int(r["shots"]): float(r["map_50_mean"]) for r in rows(tmp_path / "sweep" / "sweep.csv")}
        zero = []
        for seed in range(5):
            out = tmp_path / f"zero{seed}.csv"
            assert main(["eval", "--model", str(model), "--embeddings", f"random:{seed}", "--data", str(data),
                         "--out", str(out)]) == 0
            zero.append(float(rows(out)[0]["map_50"]))
        proxy = float(np.mean(zero))
        seq = [means[1], means[4], means[16]]
        drops = [a - b for a, b in zip(seq, seq[1:]) if b < a]
        info["detail"] = ("mAP@50 1/4/16-shot " + "/".join(f"{v:.3f}" for v in seq) +
                          f", random proxy {proxy:.3f}, data + pretrain {build:.0f}s")
        assert len(drops) <= 1 and all(d <= 0.02 for d in drops)
        assert means[16] >= 0.5
        assert means[16] - proxy >= 0.2


# -- 7 ------------------------------------------------------------------------------
@pytest.mark.slow
def test_7_embeddings_per_class_plateau(pretrained, tmp_path):
    with criterion(7, budget=20 * 60) as info:
        parts, failures = [], []
        for sigma in (0.02, 1.0):
            out = tmp_path / f"sigma{sigma}"
            assert main(["adapt", "--model", str(pretrained / "pre" / "model.eadk"), "--data",
                         str(pretrained / "data"), "--out", str(out), "--shots", "8", "--runs", "5",
                         "--embeddings-per-class", "2,4,8", "--sigma-init", str(sigma)]) == 0
            m = {int(r["embeddings_per_class"]): float(r["map_50_mean"]) for r in rows(out / "ablation.csv")}
            parts.append(f"sigma {sigma}: T2/T4/T8 {m[2]:.3f}/{m[4]:.3f}/{m[8]:.3f}")
            if m[4] < m[2] - 0.02 or abs(m[8] - m[4]) > 0.05:
                failures.append(sigma)
        info["detail"] = "; ".join(parts)
        assert not failures, f"trend broken for sigma {failures}"


# -- 8 ------------------------------------------------------------------------------
def test_8_determinism(small_run, tmp_path):
    with criterion(8) as info:
        data = small_run / "data"
        commands = {
            "gen-data": ["gen-data", "--scenes", "12", "--eval-scenes", "6"],
            "pretrain": ["pretrain", "--data", str(data), "--iters", "5", "--batch", "2"] + SMALL,
            "adapt": ["adapt", "--model", str(small_run / "pre" / "model.eadk"), "--data", str(data),
                      "--shots", "2", "--runs", "2", "--iters", "5"],
        }
        for name, argv in commands.items():
            out = tmp_path / name
            digests = []
            for _ in range(2):
                shutil.rmtree(out, ignore_errors=True)
                assert main(argv + ["--out", str(out)]) == 0
                digests.append(tree_digest(out))
            assert digests[0] == digests[1], name
        info["detail"] = "gen-data, pretrain, adapt byte-identical"


# -- 9 ------------------------------------------------------------------------------
def test_9_adapt_recipe_defaults():
    with criterion(9, budget=1) as info:
        s = cli.resolve("adapt", {"model": "m", "data": "d", "out": "o"})
        snapshot = {k: s[k] for k in ("iterations", "batch_size", "lr0", "embeddings_per_class", "runs",
                                      "beta1", "beta2", "eps", "weight_decay", "sigma_init", "hflip", "crop")}
        assert snapshot == {"iterations": 400, "batch_size": 4, "lr0": 2.0, "embeddings_per_class": "4",
                            "runs": 10, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0,
                            "sigma_init": 0.02, "hflip": True, "crop": True}
        info["detail"] = "400 it, batch 4, lr0 2.0, AdamW betas 0.9/0.999, T=4, runs=10"


def test_default_adapt_run_uses_cosine_adamw(small_run, tmp_path, monkeypatch):
    """Companion to criterion 9: the echoed config and the lr trace of a default run."""
    calls = []
    real_step = train.adamw_step

    def spy(params, grads, state, lr, config=train.ADAPT_DEFAULTS, step=None):
        calls.append(len(params))
        return real_step(params, grads, state, lr, config, step=step)

    monkeypatch.setattr(train, "adamw_step", spy)
    out = tmp_path / "a"
    assert main(["adapt", "--model", str(small_run / "pre" / "model.eadk"), "--data",
                 str(small_run / "data"), "--out", str(out), "--shots", "1", "--runs", "1"]) == 0
    log = (out / "run.log").read_text().splitlines()
    for line in ("iterations = 400", "batch_size = 4", "lr0 = 2.0", "embeddings_per_class = 4",
                 "beta1 = 0.9", "beta2 = 0.999"):
        assert line in log, line
    lrs = [float(r["lr"]) for r in rows(out / "adapt_loss.csv")]
    assert len(lrs) == 400
    assert all(abs(lr - train.cosine_lr(i, 400, 2.0)) <= 5e-7 for i, lr in enumerate(lrs))  # CSV keeps 6 decimals
    assert calls == [1] * 400  # AdamW on the table alone
