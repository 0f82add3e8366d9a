"""Primary acceptance criteria, one PASS/FAIL line each.

The toy criteria train on the 40-identity synthetic set with ``configs/toy.cfg``.
Pipeline runs are shared through module-scoped fixtures; the whole module takes
roughly a quarter of an hour on one core.
"""

import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from versreid import tensor as T
from versreid.config import parse_config
from versreid.data import SCENES, PKSampler, generate_dataset, scene_labels
from versreid.evaluation import evaluate_cmc_map
from versreid.experiments import backbone_tensors, first_epoch_loss, mpda_probe, run_pipeline
from versreid.losses import LossConfig, batch_hard_triplet, distill_variant, rkd_loss, stage1_loss
from versreid.model import forward_bank
from versreid.mpda import info_nce
from versreid.optim import zero_grads
from versreid.pipeline import distill, evaluate, feature_extractor, oracle_scene_classifier, train_bank

from test_evaluation import brute_force, random_instance
from test_losses import LOSSES, kl_oracle, pk_batch, rkd_oracle, triplet_oracle
from test_tensor import OPS

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    t = time.perf_counter()
    m = generate_dataset(tmp_path_factory.mktemp("toy"), 40, 9, seed=0)
    m.preload()
    return m, time.perf_counter() - t


@pytest.fixture(scope="module")
def cfg():
    return parse_config(CONFIG)


@pytest.fixture(scope="module")
def main_run(toy, cfg, tmp_path_factory):
    return run_pipeline(cfg, toy[0], tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="module")
def seed_runs(toy, cfg, main_run):
    """Prompted bank per seed, evaluated; seed 0 reuses the main run."""
    runs = {0: main_run}
    for s in SEEDS[1:]:
        runs[s] = run_pipeline(cfg.replace(seed=s), toy[0], with_distill=False)
    return runs


# -- gradients, oracles, metric ----------------------------------------------------

def test_gradient_suite(criterion):
    start = time.perf_counter()
    checked = 0
    for name in sorted(OPS):
        fn, make = OPS[name]
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        for _ in range(20):
            T.check_gradients(fn, make(rng))
        checked += 1
    for name in sorted(LOSSES):
        rng = np.random.default_rng(len(name))
        for _ in range(20):
            fn, inputs = LOSSES[name](rng)
            T.check_gradients(fn, inputs)
        checked += 1
    rng = np.random.default_rng(0)
    for _ in range(20):
        T.check_gradients(lambda q, k: info_nce(T.l2_normalize(q), T.l2_normalize(k), 0.2),
                          [rng.normal(size=(4, 5)), rng.normal(size=(4, 5))])
    checked += 1
    elapsed = time.perf_counter() - start
    assert criterion("gradient suite", elapsed < 60,
                     f"{checked} ops/losses x 20 instances, rel err < 1e-4, {elapsed:.1f}s (< 60s)")


def test_loss_oracles(criterion):
    t64 = lambda x: T.Tensor(np.asarray(x, dtype=np.float64))
    worst = 0.0
    with T.float64_replay():
        worked = [
            (batch_hard_triplet(t64([[0.0], [0.9], [1.0], [1.9]]), [0, 0, 1, 1], 0.3), 0.65),
            (rkd_loss(t64([[0, 0], [2, 0]]), t64([[0, 0], [1, 0]])), 9.0),
            (distill_variant("l1", t64([[3.0, 4.0]]), t64([[0.0, 0.0]])), 7.0),
            (distill_variant("l2", t64([[3.0, 4.0]]), t64([[0.0, 0.0]])), 5.0),
            (distill_variant("kl", t64([[0, 0]]), t64([[0, 0]]), t64([[0.5, 0.5]]),
                             t64([[1.0, 0.0]])), math.log(2)),
        ]
        for got, want in worked:
            worst = max(worst, abs(float(got.data) - want))
        for seed in range(100):
            f, ids = pk_batch(seed)
            got = float(batch_hard_triplet(t64(f), ids, 0.3).data)
            worst = max(worst, abs(got - triplet_oracle(f.tolist(), ids.tolist(), 0.3)))
            rng = np.random.default_rng(seed)
            b, d, c = rng.integers(2, 8), rng.integers(1, 5), rng.integers(2, 6)
            s, t = rng.normal(size=(b, d)), rng.normal(size=(b, d))
            ps, pt = rng.dirichlet(np.ones(c), size=b), rng.dirichlet(np.ones(c), size=b)
            sl, tl = s.tolist(), t.tolist()
            l1 = sum(sum(abs(x - y) for x, y in zip(u, v)) for u, v in zip(sl, tl)) / b
            l2 = sum(math.dist(u, v) for u, v in zip(sl, tl)) / b
            pairs = [
                (rkd_loss(t64(s), t64(t)), rkd_oracle(sl, tl)),
                (distill_variant("rkd", t64(s), t64(t)), rkd_oracle(sl, tl)),
                (distill_variant("l1", t64(s), t64(t)), l1),
                (distill_variant("l2", t64(s), t64(t)), l2),
                (distill_variant("kl", t64(s), t64(t), t64(ps), t64(pt)),
                 kl_oracle(pt.tolist(), ps.tolist())),
            ]
            for got, want in pairs:
                worst = max(worst, abs(float(got.data) - want))
    assert criterion("loss oracles", worst < 1e-5,
                     f"5 worked examples + 100 random batches per loss, max abs err {worst:.2e}")


def test_metric_oracle(criterion):
    start = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        inst = random_instance(seed)
        res = evaluate_cmc_map(*inst)
        cmc, m, valid = brute_force(*[x.tolist() for x in inst])
        mismatches += not (res.num_valid == valid and np.array_equal(res.cmc, cmc)
                           and abs(res.mAP - m) < 1e-12)
    elapsed = time.perf_counter() - start
    assert criterion("metric oracle", mismatches == 0 and elapsed < 30,
                     f"{50 - mismatches}/50 instances match brute force (Q<=100, G<=500), "
                     f"{elapsed:.1f}s (< 30s)")


# -- training-loop properties ---------------------------------------------------------

def test_alpha_zero_degeneration(criterion, toy, cfg, main_run):
    manifest = toy[0]
    steps = 2 * len(PKSampler(manifest.split("train"), cfg.P, cfg.K))
    a = distill(cfg.replace(alpha=0.0), main_run.bank.branch, manifest, max_steps=steps)
    b = distill(cfg, main_run.bank.branch, manifest, use_teacher=False, max_steps=steps)
    same_traj = a.column("loss").tobytes() == b.column("loss").tobytes()
    same_ckpt = a.checkpoint().tensors.keys() == b.checkpoint().tensors.keys() and all(
        a.checkpoint().tensors[n].tobytes() == b.checkpoint().tensors[n].tobytes()
        for n in a.checkpoint().tensors)
    assert criterion("alpha=0 degeneration", same_traj and same_ckpt,
                     f"{steps} steps: loss trajectory identical={same_traj}, "
                     f"parameters identical={same_ckpt}")


def test_gradient_routing(criterion, toy, cfg):
    manifest = toy[0]
    bank = train_bank(cfg, manifest, max_steps=0).branch
    bank.training = True
    rng = np.random.default_rng(0)
    leaks = 0
    for s in range(len(SCENES)):
        batch = PKSampler(manifest.split("train", scene=s), cfg.P, cfg.K).sample(rng)
        ids = {i: k for k, i in enumerate(sorted({x.identity for x in batch}))}
        zero_grads(bank.params)
        with T.GradTape() as tape:
            f, p = forward_bank(manifest.images(batch), scene_labels(batch), bank)
            loss = stage1_loss(f, p, [ids[x.identity] for x in batch], LossConfig())
        tape.backward(loss)
        g = bank["prompts.scene"].grad
        others = [k for k in range(len(SCENES)) if k != s]
        leaks += int(np.count_nonzero(g[others])) + int(not np.any(g[s]))
    assert criterion("gradient routing", leaks == 0,
                     f"{len(SCENES)} single-scene batches, {leaks} non-zero entries on "
                     f"unselected prompt groups")


# -- toy end-to-end ---------------------------------------------------------------------

def test_toy_bank_joint_rank1(criterion, toy, main_run):
    r1 = main_run.reports["bank"].joint.rank1
    total = toy[1] + main_run.total_seconds
    ok = r1 >= 0.80 and total < 600
    assert criterion("toy (a) bank joint R-1", ok,
                     f"R-1 {r1:.3f} (>= 0.80); data + pretrain + bank + distill + eval "
                     f"{total:.0f}s (< 600s)")


def test_toy_vbranch_close_to_bank(criterion, main_run):
    bank = main_run.reports["bank"].joint.rank1
    vb = main_run.reports["vbranch"].joint.rank1
    assert criterion("toy (b) V-Branch vs bank", abs(vb - bank) <= 0.05,
                     f"V-Branch R-1 {vb:.3f} vs bank {bank:.3f}, |diff| {abs(vb - bank):.3f} "
                     f"(<= 0.05)")


def test_toy_prompts_help_clothing_change(criterion, toy, cfg, seed_runs):
    manifest = toy[0]
    prompted, plain = [], []
    for s in SEEDS:
        run = seed_runs[s]
        prompted.append(run.reports["bank"].row("clothing_change").rank1)
        c0 = cfg.replace(seed=s, prompts_per_scene=0)
        base = train_bank(c0, manifest, init=backbone_tensors(run.pretrain))
        plain.append(evaluate(c0, base.branch, manifest).row("clothing_change").rank1)
    margin = statistics.median(prompted) - statistics.median(plain)
    detail = ", ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, a, b in zip(SEEDS, prompted, plain))
    assert criterion("toy (c) clothing-change margin over N=0", margin >= 0.03,
                     f"median {statistics.median(prompted):.3f} vs {statistics.median(plain):.3f}, "
                     f"margin {margin:+.3f} (>= 0.03); {detail}")


def test_ensemble_ordering(criterion, toy, cfg, main_run):
    manifest = toy[0]
    bank = main_run.bank.branch
    maps = [evaluate(cfg, bank, manifest, "hard", nz).joint.map for nz in (0.0, 0.1, 0.3)]
    ordered = maps[0] >= maps[1] >= maps[2]

    samples = manifest.split("query") + manifest.split("gallery")
    pred, probs = oracle_scene_classifier(samples, bank.config.num_scenes, 0.0,
                                          np.random.default_rng([cfg.seed, 4]))
    override = {id(x): (pred[i], probs[i]) for i, x in enumerate(samples)}
    hard = feature_extractor(bank, manifest, "hard", override)(samples)
    labelled = feature_extractor(bank, manifest)(samples)
    bitwise = hard.tobytes() == labelled.tobytes()
    labelled_map = main_run.reports["bank"].joint.map
    assert criterion("ensemble ordering", ordered and bitwise and maps[0] == labelled_map,
                     f"hard mAP {maps[0]:.4f} / {maps[1]:.4f} / {maps[2]:.4f} at noise 0 / 0.1 / 0.3; "
                     f"noise 0 features bitwise equal to labelled bank={bitwise}")


def test_mpda_ablation(criterion, toy, cfg, seed_runs):
    on = [first_epoch_loss(seed_runs[s].bank) for s in SEEDS]
    off = [mpda_probe(cfg.replace(seed=s), toy[0], mpda=False) for s in SEEDS]
    m_on, m_off = statistics.median(on), statistics.median(off)
    assert criterion("MPDA ablation", m_on <= m_off,
                     f"median first-epoch stage-1 loss {m_on:.4f} (on) vs {m_off:.4f} (off); "
                     + ", ".join(f"seed {s}: {a:.3f}/{b:.3f}" for s, a, b in zip(SEEDS, on, off)))


def test_determinism(criterion, toy, cfg, main_run, tmp_path_factory):
    again = run_pipeline(cfg, toy[0], tmp_path_factory.mktemp("run_b"))
    same_hash = again.digests == main_run.digests
    same_report = all(again.reports[k].to_jsonl() == main_run.reports[k].to_jsonl()
                      for k in ("bank", "vbranch"))
    assert criterion("determinism", same_hash and same_report,
                     f"checkpoint sha256 equal for {sorted(main_run.digests)}={same_hash}, "
                     f"EvalReports equal={same_report}")
