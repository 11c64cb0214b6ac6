"""Acceptance suite: nine verifiable properties of the full pipeline.

Each criterion prints a single machine-greppable pass/fail line of the form
``ACCEPTANCE <n> <name>: PASS/FAIL``. The training-heavy criteria (5-7) are
marked slow; the whole module is deterministic given its fixed seeds.
"""

import shutil
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from aesthgaze.config import StimulusConfig
from aesthgaze.explain import grad_cam, temporal_saliency
from aesthgaze.model import (VIDEO_ONLY_MEANFILL, ModelConfig, init_model,
                             parameter_groups)
from aesthgaze.preprocess import (AlignedSample, AttentionMapSequence,
                                  PupilImageSequence, attention_maps, gaf,
                                  mtf, normalize_and_binarize,
                                  preprocess_record, quantile_bins)
from aesthgaze.records import GazeTrace, SequenceRecord
from aesthgaze.splits import split_by_participant
from aesthgaze.synthgen import gen_dataset
from aesthgaze.train import (TrainConfig, TrialData, evaluate,
                             format_ablation_table, make_report,
                             run_ablation_variant, stage1_pretrain,
                             stage2_transfer, stage3_joint_finetune,
                             train_full_pipeline)


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {number} {name}: FAIL")
        raise
    print(f"\nACCEPTANCE {number} {name}: PASS")


def _preprocess_manifest(manifest, stim):
    """Manifest -> list of AlignedSamples, one video resident at a time."""
    table = normalize_and_binarize(manifest.records)
    samples = []
    cache = {}
    for ref in sorted(manifest.records,
                      key=lambda r: (r.video_id, r.participant_id)):
        if ref.video_id not in cache:
            cache.clear()
            cache[ref.video_id] = ref.load(manifest.root).frames
        record = SequenceRecord(
            ref.participant_id, ref.video_id, cache[ref.video_id],
            GazeTrace.load_csv(manifest.root / ref.gaze_path),
            dict(ref.ratings))
        labels = table.binary[(ref.participant_id, ref.video_id)]
        samples.append(preprocess_record(record, labels, stim))
    return samples


# ---------------------------------------------------------------------------
# 1. Transform oracles


def test_c1_transform_oracles():
    with criterion(1, "transform oracles"):
        rng = np.random.default_rng(0)
        # warm any jit compilation outside the timed region
        gaze_stim = StimulusConfig(duration_s=2, fps=2, gaze_hz=60,
                                   work_w=96, work_h=54)
        n = gaze_stim.n_gaze
        warm = GazeTrace(np.arange(n) / 60.0, np.full(n, 500.0),
                         np.full(n, 300.0), np.full(n, 4.0), np.ones(n, bool))
        attention_maps(warm, 12.0, gaze_stim)

        t0 = time.perf_counter()
        # GAF vs the cos-addition identity, 1000 random windows
        worst = 0.0
        for _ in range(1000):
            w = rng.standard_normal(rng.integers(2, 33))
            lo, hi = w.min(), w.max()
            x = np.zeros_like(w) if hi == lo else 2 * (w - lo) / (hi - lo) - 1
            s = np.sqrt(np.clip(1 - x * x, 0, None))
            worst = max(worst, np.abs(gaf(w) - (np.outer(x, x)
                                                - np.outer(s, s))).max())
        assert worst <= 1e-6

        # MTF vs direct transition counting, 1000 random windows
        for _ in range(1000):
            q = int(rng.integers(2, 9))
            w = rng.standard_normal(rng.integers(4, 40))
            bins = quantile_bins(w, q)
            counts = np.zeros((q, q))
            for a, b in zip(bins[:-1], bins[1:]):
                counts[a, b] += 1
            rows = counts.sum(axis=1, keepdims=True)
            trans = np.where(rows > 0,
                             counts / np.where(rows == 0, 1, rows), 1.0 / q)
            assert np.allclose(mtf(w, q), trans[np.ix_(bins, bins)])

        # attention maps: unit mass and mirror symmetry
        xs = np.where(np.arange(n) % 2 == 0, 480.0, 1919.0 - 480.0)
        gaze = GazeTrace(np.arange(n) / 60.0, xs, np.full(n, 540.0),
                         np.full(n, 4.0), np.ones(n, bool))
        maps = attention_maps(gaze, 20.0, gaze_stim).maps
        for t in range(maps.shape[0]):
            assert maps[t].sum() == pytest.approx(1.0, abs=1e-5)
            assert np.abs(maps[t, 0] - maps[t, 0, :, ::-1]).max() <= 1e-3
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"transform oracles took {elapsed:.2f}s"


# ---------------------------------------------------------------------------
# 2. Aggregation identity


def test_c2_aggregation_identity():
    with criterion(2, "aggregation identity"):
        obj_vals = [0.743, 0.743, 0.743, 0.657]
        subj_vals = [0.629, 0.657, 0.629, 0.657, 0.657, 0.743,
                     0.657, 0.714, 0.686, 0.686, 0.629]
        per_dim = {i: v for i, v in enumerate(obj_vals + subj_vals)}
        rep = make_report(per_dim, n_trials=35, mode="full_multimodal")
        assert rep.objective == pytest.approx(0.722, abs=5e-4)
        assert rep.subjective == pytest.approx(0.668, abs=5e-4)


# ---------------------------------------------------------------------------
# 3. Gradient check per parameter group


def test_c3_gradient_check():
    with criterion(3, "gradient check"):
        t0 = time.perf_counter()
        cfg = ModelConfig(n_tasks=2, seq_len=3, in_h=8, in_w=8,
                          video_channels=(2, 3, 4), video_task_channels=3,
                          pupil_channels=(2, 3), pupil_task_channels=2,
                          pupil_size=8, lstm_hidden=4, shared_lstm_layers=1,
                          head_hidden=4)
        model = init_model(cfg, 5).double().eval()
        g = torch.Generator().manual_seed(3)
        frames = torch.rand((1, 3, 3, 8, 8), generator=g, dtype=torch.float64)
        pupil = torch.rand((1, 3, 2, 8, 8), generator=g,
                           dtype=torch.float64) * 2 - 1
        attn = torch.rand((1, 3, 1, 8, 8), generator=g, dtype=torch.float64)

        def loss():
            return model(frames, pupil, attn).sum()

        base = loss()
        grads = torch.autograd.grad(base, list(model.parameters()))
        by_name = {n: g for (n, _), g in
                   zip(model.named_parameters(), grads)}
        eps = 1e-6
        for group, members in parameter_groups(model).items():
            # probe the coordinate with the largest gradient in the group
            best = max(((n, p) for n, p in members),
                       key=lambda np_: by_name[np_[0]].abs().max())
            name, p = best
            flat = by_name[name].reshape(-1)
            idx = int(flat.abs().argmax())
            ana = flat[idx].item()
            assert ana != 0.0, f"group {group} has all-zero gradient"
            with torch.no_grad():
                pv = p.reshape(-1)
                old = pv[idx].item()
                pv[idx] = old + eps
                up = loss().item()
                pv[idx] = old - eps
                down = loss().item()
                pv[idx] = old
            num = (up - down) / (2 * eps)
            rel = abs(num - ana) / max(abs(ana), 1e-12)
            assert rel < 1e-4, f"group {group}: rel err {rel:.2e}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 120, f"gradient check took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 4. Stage protocol


def test_c4_stage_protocol():
    with criterion(4, "stage protocol"):
        cfg = ModelConfig(n_tasks=15, seq_len=3, in_h=16, in_w=16,
                          video_channels=(2, 3, 4), video_task_channels=3,
                          pupil_channels=(2, 3), pupil_task_channels=2,
                          pupil_size=8, lstm_hidden=4, shared_lstm_layers=2,
                          head_hidden=4)
        g = torch.Generator().manual_seed(0)

        def rand_data(n, seed):
            gg = torch.Generator().manual_seed(seed)
            return TrialData(
                frames=torch.rand((n, 3, 3, 16, 16), generator=gg),
                pupil=torch.rand((n, 3, 2, 8, 8), generator=gg) * 2 - 1,
                attn=torch.rand((n, 3, 1, 16, 16), generator=gg),
                labels=(torch.rand((n, 15), generator=gg) > 0.5).float(),
                participant_ids=[f"P{i}" for i in range(n)],
                video_ids=[f"V{i}" for i in range(n)])

        model = init_model(cfg, 0)
        train, val = rand_data(8, 1), rand_data(2, 2)
        tc = TrainConfig(stage1_epochs=2, stage3_epochs=25, patience=100,
                         seed=0, batch_size=4)
        stage1_pretrain(model, train, val, tc)
        mask = stage2_transfer(model, tc)

        # after stage 2 the hidden-to-hidden parameters are bit-equal
        src, dst = model.temporal.shared_lstm, model.spatial.shared_lstm
        for k in range(cfg.shared_lstm_layers):
            assert torch.equal(getattr(src, f"weight_hh_l{k}"),
                               getattr(dst, f"weight_hh_l{k}"))
            assert torch.equal(getattr(src, f"bias_hh_l{k}"),
                               getattr(dst, f"bias_hh_l{k}"))

        before = {n: p.detach().clone()
                  for n, p in model.named_parameters() if n in mask}
        # 8 samples / batch 4 = 2 steps per epoch; 25 epochs = 50 steps
        stage3_joint_finetune(model, mask, train, val, tc)
        named = dict(model.named_parameters())
        for n, m in mask.items():
            after = named[n].detach()
            assert torch.equal(before[n][m], after[m])
            free = ~m
            changed = (before[n][free] != after[free]).float().mean().item()
            assert changed >= 0.99, f"{n}: only {changed:.1%} moved"


# ---------------------------------------------------------------------------
# 5. Overfit capability (default architecture)


@pytest.mark.slow
def test_c5_overfit_capability(tmp_path):
    with criterion(5, "overfit capability"):
        t0 = time.perf_counter()
        stim = StimulusConfig(duration_s=80, fps=2, gaze_hz=60,
                              work_w=80, work_h=45)
        manifest = gen_dataset(4, 4, seed=11, out_dir=tmp_path / "d",
                               stim=stim, videos_per_participant=4)
        samples = _preprocess_manifest(manifest, stim)
        data = TrialData.from_aligned(samples)
        assert data.n == 16
        mc = ModelConfig(in_h=45, in_w=80)   # default widths and depth
        tc = TrainConfig(stage1_epochs=200, stage3_epochs=100, patience=500,
                         stop_train_accuracy=0.99, seed=0, batch_size=4)
        model, history, _, _ = train_full_pipeline(mc, tc, data, data)
        rep = evaluate(model, data, batch_size=4)
        elapsed = time.perf_counter() - t0
        assert rep.overall >= 0.95, f"train accuracy {rep.overall:.3f}"
        assert elapsed < 900, f"overfit run took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 6 & 7. Privileged information and ablation grid


PRIV_MODEL = ModelConfig(seq_len=16, in_h=45, in_w=80,
                         video_channels=(4, 8, 16), video_task_channels=8,
                         pupil_channels=(4, 8), pupil_task_channels=4,
                         pupil_size=32, lstm_hidden=32, shared_lstm_layers=2,
                         head_hidden=32)


@pytest.fixture(scope="module")
def priv_subsets(tmp_path_factory):
    """200 synthetic trials whose subjective labels depend on gaze latents."""
    stim = StimulusConfig(duration_s=16, fps=2, gaze_hz=60,
                          work_w=80, work_h=45)
    root = tmp_path_factory.mktemp("priv")
    manifest = gen_dataset(20, 20, seed=7, out_dir=root, stim=stim,
                           videos_per_participant=10)
    data = TrialData.from_aligned(_preprocess_manifest(manifest, stim))
    assert data.n == 200
    split = split_by_participant(sorted(set(data.participant_ids)), seed=0)
    subsets = {}
    for name in ("train", "val", "test"):
        members = set(split.participants(name))
        idx = [i for i, p in enumerate(data.participant_ids) if p in members]
        subsets[name] = data.subset(idx)
    shutil.rmtree(root, ignore_errors=True)
    return subsets


@pytest.fixture(scope="module")
def priv_runs(priv_subsets):
    """Per seed: multimodal training + video-only eval, and the 'neither'
    baseline. Seed-0 models are reused by the ablation criterion."""
    t0 = time.perf_counter()
    results = {}
    for seed in (0, 1, 2):
        tc = TrainConfig(stage1_epochs=15, stage3_epochs=15, patience=5,
                         seed=seed, batch_size=4, modality_dropout=0.5)
        model, _, stats, _ = train_full_pipeline(
            PRIV_MODEL, tc, priv_subsets["train"], priv_subsets["val"])
        priv_rep = evaluate(model, priv_subsets["test"],
                            VIDEO_ONLY_MEANFILL, stats)
        full_rep = evaluate(model, priv_subsets["test"])
        _, _, _, neither_rep = run_ablation_variant(
            "neither", PRIV_MODEL, tc, priv_subsets["train"],
            priv_subsets["val"], priv_subsets["test"])
        results[seed] = {"priv": priv_rep, "full": full_rep,
                         "neither": neither_rep}
    results["elapsed"] = time.perf_counter() - t0
    return results


@pytest.mark.slow
def test_c6_privileged_information_trend(priv_runs):
    with criterion(6, "privileged information trend"):
        priv = np.mean([priv_runs[s]["priv"].subjective for s in (0, 1, 2)])
        base = np.mean([priv_runs[s]["neither"].subjective for s in (0, 1, 2)])
        print(f"\n  video-only(mean-fill) subjective {priv:.3f} vs "
              f"video-only-trained {base:.3f}")
        assert priv >= base - 0.01
        assert priv_runs["elapsed"] < 3600


@pytest.mark.slow
def test_c7_ablation_grid(priv_runs, priv_subsets):
    with criterion(7, "ablation grid"):
        tc = TrainConfig(stage1_epochs=15, stage3_epochs=15, patience=5,
                         seed=0, batch_size=4, modality_dropout=0.5)
        grid = {
            "full": (priv_runs[0]["full"].objective,
                     priv_runs[0]["full"].subjective),
            "neither": (priv_runs[0]["neither"].objective,
                        priv_runs[0]["neither"].subjective),
        }
        for variant in ("no_attention", "no_pupil"):
            _, _, _, rep = run_ablation_variant(
                variant, PRIV_MODEL, tc, priv_subsets["train"],
                priv_subsets["val"], priv_subsets["test"])
            grid[variant] = (rep.objective, rep.subjective)
        table = format_ablation_table(grid)
        print("\n" + table)
        lines = table.strip().splitlines()
        assert len(lines) == 5                      # header + 4 variants
        for line in lines[1:]:
            cells = line.split("\t")
            assert len(cells) == 3
            assert all(0.0 <= float(c) <= 1.0 for c in cells[1:])
        assert grid["full"][0] >= grid["neither"][0]   # objective accuracy


# ---------------------------------------------------------------------------
# 8. Explainability contracts on trained toy models


RECT_BBOX = (12, 29, 12, 29)        # rows/cols of the rectangle in 32x32


def _presence_sample(rng, positive, t_steps):
    """Black 32x32 scene; a green rectangle appears iff positive."""
    y0, y1, x0, x1 = RECT_BBOX
    frames = np.zeros((t_steps, 3, 32, 32), dtype=np.float32)
    for t in range(t_steps):
        if positive:
            col = np.array([0.25, 0.75, 0.2]) + rng.uniform(-0.05, 0.05, 3)
            frames[t, :, y0:y1, x0:x1] = col[:, None, None].astype(np.float32)
    return _wrap_frames(frames, positive)


def _early_color_sample(rng, positive, t_steps, sig_t):
    """Noisy 16x16 scene; a rectangle whose color encodes the label is shown
    only in the first ``sig_t`` timesteps."""
    frames = np.full((t_steps, 3, 16, 16), 0.2, dtype=np.float32)
    frames += rng.normal(0, 0.02, frames.shape).astype(np.float32)
    for t in range(sig_t):
        if positive:
            col = np.array([0.25 + rng.uniform(-0.05, 0.05),
                            0.75 + rng.uniform(-0.1, 0.1),
                            0.2 + rng.uniform(-0.05, 0.05)])
        else:
            col = np.array([0.75 + rng.uniform(-0.1, 0.1),
                            0.25 + rng.uniform(-0.05, 0.05),
                            0.7 + rng.uniform(-0.1, 0.1)])
        frames[t, :, 8:15, 8:15] = col[:, None, None].astype(np.float32)
    return _wrap_frames(frames, positive)


def _wrap_frames(frames, positive):
    t_steps, _, h, w = frames.shape
    return AlignedSample(
        frames=frames,
        pupil_images=PupilImageSequence(
            images=np.zeros((t_steps, 2, 8, 8), dtype=np.float32)),
        attention_maps=AttentionMapSequence(
            maps=np.zeros((t_steps, 1, h, w), dtype=np.float32),
            sigma_px=1.0),
        labels=np.full(15, 1.0 if positive else 0.0, dtype=np.float32),
        participant_id="p", video_id="v")


def _toy_config(seq_len, size):
    return ModelConfig(n_tasks=15, seq_len=seq_len, in_h=size, in_w=size,
                       video_channels=(4, 6, 8), video_task_channels=4,
                       pupil_channels=(2, 3), pupil_task_channels=2,
                       pupil_size=8, lstm_hidden=8, shared_lstm_layers=2,
                       head_hidden=8)


def _train_toy(samples, seq_len, size, seed, stage_epochs):
    data = TrialData.from_aligned(samples)
    tc = TrainConfig(stage1_epochs=stage_epochs, stage3_epochs=stage_epochs,
                     patience=100, seed=seed, stop_train_accuracy=0.99,
                     batch_size=4)
    model, _, _, _ = train_full_pipeline(_toy_config(seq_len, size), tc,
                                         data, data)
    return model, data


@pytest.mark.slow
def test_c8_explainability_contracts():
    with criterion(8, "explainability contracts"):
        # (a) spatial localization: the label-driving rectangle's bbox
        rng = np.random.default_rng(0)
        model, data = _train_toy(
            [_presence_sample(rng, i % 2 == 0, 8) for i in range(24)],
            seq_len=8, size=32, seed=1, stage_epochs=40)
        assert evaluate(model, data).overall >= 0.9
        y0, y1, x0, x1 = RECT_BBOX
        area_fraction = ((y1 - y0) * (x1 - x0)) / (32 * 32)
        for probe_seed in (97, 98, 99):
            pos = _presence_sample(np.random.default_rng(probe_seed), True, 8)
            for layer in ("spatial.video_taskconv", "temporal.video_taskconv"):
                res = grad_cam(model, pos, task=3, layer=layer)
                cam = res.spatial
                assert np.all(cam >= 0) and cam.max() <= 1 + 1e-6
                mass = cam.sum(axis=0)
                total = mass.sum()
                ys, xs = np.mgrid[0:32, 0:32]
                cy = (mass * ys).sum() / total
                cx = (mass * xs).sum() / total
                assert y0 <= cy < y1 and x0 <= cx < x1, \
                    f"{layer}: mass center ({cy:.1f}, {cx:.1f}) outside bbox"
                inside = mass[y0:y1, x0:x1].sum() / total
                assert inside >= 1.05 * area_fraction, \
                    f"{layer}: no concentration ({inside:.2f})"

        # (b) temporal localization: label fixed by the first eighth of the
        # sequence; at least half the saliency mass in the first quarter
        rng = np.random.default_rng(1)
        model2, data2 = _train_toy(
            [_early_color_sample(rng, i % 2 == 0, 16, sig_t=2)
             for i in range(24)],
            seq_len=16, size=16, seed=2, stage_epochs=60)
        assert evaluate(model2, data2).overall >= 0.9
        pos2 = _early_color_sample(np.random.default_rng(98), True, 16,
                                   sig_t=2)
        for task in (3, 7):
            res = temporal_saliency(model2, pos2, task=task)
            w = res.temporal
            assert w.sum() == pytest.approx(1.0, abs=1e-6)
            assert np.all(w >= 0)
            assert w[:4].sum() >= 0.5, \
                f"task {task}: early mass {w[:4].sum():.2f}"


# ---------------------------------------------------------------------------
# 9. Determinism


def test_c9_determinism():
    with criterion(9, "determinism"):
        cfg = ModelConfig(n_tasks=15, seq_len=4, in_h=16, in_w=16,
                          video_channels=(2, 3, 4), video_task_channels=3,
                          pupil_channels=(2, 3), pupil_task_channels=2,
                          pupil_size=8, lstm_hidden=4, shared_lstm_layers=2,
                          head_hidden=4)

        def run():
            gg = torch.Generator().manual_seed(10)
            data = TrialData(
                frames=torch.rand((8, 4, 3, 16, 16), generator=gg),
                pupil=torch.rand((8, 4, 2, 8, 8), generator=gg) * 2 - 1,
                attn=torch.rand((8, 4, 1, 16, 16), generator=gg),
                labels=(torch.rand((8, 15), generator=gg) > 0.5).float(),
                participant_ids=[f"P{i}" for i in range(8)],
                video_ids=[f"V{i}" for i in range(8)])
            tc = TrainConfig(stage1_epochs=3, stage3_epochs=3, patience=10,
                             seed=4, batch_size=4)
            model, _, stats, _ = train_full_pipeline(
                cfg, tc, data.subset(range(6)), data.subset([6, 7]))
            return evaluate(model, data.subset([6, 7]),
                            VIDEO_ONLY_MEANFILL, stats)

        a, b = run(), run()
        assert a == b
        assert a.per_dimension == b.per_dimension
