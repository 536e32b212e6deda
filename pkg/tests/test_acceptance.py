"""Acceptance gate: ten end-to-end criteria, one test and one verdict line each.

The heavy criteria (C4-C7) train real policies and roll them out in the toy
environment, sharing module-scoped fixtures so pretrained parents are built
once. Verdict lines print the headline numbers; the pass/fail itself is the
test result.
"""

import time

import numpy as np
import pytest

from actionhead import grad
from actionhead import kinematics as kin
from actionhead.backbones import BackboneConfig, CondConfig, Policy
from actionhead.bench import bench_pair, run_bench
from actionhead.checkpoint import load_checkpoint
from actionhead.dataset import Dataset, NormStats, dataset_bytes
from actionhead.diffusion import make_schedule, q_sample
from actionhead.envs import (
    collect_demos,
    evaluate,
    evaluate_chunks,
    make_task,
    random_chunk_fn,
)
from actionhead.training import (
    TrainConfig,
    checkpoint_bytes,
    train_normal,
    train_stage1,
    train_stage2,
)
from actionhead.trajgen import build_dataset, family_presets

from gradcheck import fd_check


def verdict(tag, ok, detail):
    print(f"{tag}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"{tag}: {detail}"


# ---------------------------------------------------------------------------
# C1: gradient correctness, ops and whole backbones
# ---------------------------------------------------------------------------

def _away_from_kinks(x):
    return x + 0.2 * np.sign(x)


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    n_inst = 20

    def arrs(*shapes):
        return [rng.standard_normal(s) for s in shapes]

    cases = {
        "add": lambda: (lambda a, b: grad.add(a, b), arrs((3, 4), (4,))),
        "sub": lambda: (lambda a, b: grad.sub(a, b), arrs((2, 3, 4), (3, 4))),
        "mul": lambda: (lambda a, b: grad.mul(a, b), arrs((3, 4), (3, 1))),
        "matmul": lambda: (lambda a, b: grad.matmul(a, b), arrs((2, 3, 4), (2, 4, 5))),
        "reshape": lambda: (lambda a: grad.reshape(a, (6, 4)), arrs((2, 3, 4))),
        "transpose": lambda: (lambda a: grad.transpose(a, (1, 0, 2)), arrs((2, 3, 4))),
        "concat": lambda: (lambda a, b: grad.concat([a, b], axis=1), arrs((2, 3), (2, 4))),
        "slice": lambda: (lambda a: grad.slice_(a, (slice(None), slice(1, 3))), arrs((3, 5))),
        "mean": lambda: (lambda a: grad.mean(a, axis=1), arrs((3, 4, 2))),
        "mse": lambda: (lambda a, b: grad.mse(a, b), arrs((3, 4), (3, 4))),
        "relu": lambda: (lambda a: grad.relu(a), [_away_from_kinks(rng.standard_normal((3, 4)))]),
        "mish": lambda: (lambda a: grad.mish(a), arrs((3, 4))),
        "gelu": lambda: (lambda a: grad.gelu(a), arrs((3, 4))),
        "softmax": lambda: (lambda a: grad.softmax_rows(a), arrs((2, 3, 5))),
        "layernorm": lambda: (lambda a: grad.normalize(a, kind="layer"), arrs((2, 3, 6))),
        "groupnorm": lambda: (lambda a: grad.normalize(a, kind="group", groups=2), arrs((2, 4, 6))),
        "conv1d": lambda: (lambda x, w: grad.conv1d(x, w, stride=1, padding=1),
                           arrs((2, 3, 6), (4, 3, 3))),
        "conv1d_s2": lambda: (lambda x, w: grad.conv1d(x, w, stride=2, padding=0),
                              arrs((2, 3, 7), (4, 3, 3))),
        "conv1d_T": lambda: (lambda x, w: grad.conv1d_transpose(x, w, stride=2, padding=0),
                             arrs((2, 4, 4), (4, 3, 3))),
    }
    for name, make in cases.items():
        for i in range(n_inst):
            fn, arrays = make()
            fd_check(fn, arrays, seed=100 * i + 1, tol=1e-5)

    # whole backbones at 64-bit, projection-loss finite differences
    worst_model = 0.0
    for kind in ("mlp", "conv_unet", "transformer_xattn", "transformer_film"):
        cfg = BackboneConfig(kind=kind, horizon=8, action_dim=3, d_model=16, depth=2,
                             n_heads=2, dropout=0.0, down_dims=(8, 16), groups=4,
                             kernel=3, tau_sin_dim=8, tau_dim=8)
        cond = CondConfig(mode="obs", n_obs=2, cond_dim=3, feat_dim=8, hidden=12)
        stats = NormStats(cond_min=-np.ones(3, np.float32), cond_max=np.ones(3, np.float32),
                          act_min=-np.ones(3, np.float32), act_max=np.ones(3, np.float32))
        pol = Policy(cfg, cond, stats, seed=11)
        for p in pol.store.parameters():
            p.data = p.data.astype(np.float64)
        x = rng.standard_normal((2, 8, 3))
        crows = rng.uniform(-1, 1, (2, 2, 3))
        tau = np.array([1, 6])
        proj = rng.standard_normal((2, 8, 3))

        def loss_value():
            with grad.no_grad():
                return float(np.mean(pol.forward(x, tau, crows, mode="train").data * proj))

        out = pol.forward(x, tau, crows, mode="train")
        grad.backward(grad.mean(grad.mul(out, grad.Tensor(proj))))
        params = [p for p in pol.store.parameters() if p.grad is not None]
        for j in range(20):
            p = params[rng.integers(len(params))]
            idx = np.unravel_index(int(rng.integers(p.size)), p.data.shape)
            orig = p.data[idx]
            eps = 1e-6 * max(1.0, abs(orig))
            p.data[idx] = orig + eps
            lp = loss_value()
            p.data[idx] = orig - eps
            lm = loss_value()
            p.data[idx] = orig
            num = (lp - lm) / (2 * eps)
            worst_model = max(worst_model, abs(p.grad[idx] - num) / (1.0 + abs(num)))
        pol.store.zero_grad()

    dt = time.perf_counter() - t0
    ok = worst_model < 1e-4 and dt < 120.0
    verdict("C1 gradient correctness", ok,
            f"{n_inst} instances x {len(cases)} ops at 1e-5, worst whole-model "
            f"rel-err {worst_model:.2e} (<1e-4), {dt:.1f}s")


# ---------------------------------------------------------------------------
# C2: forward kinematics against independent oracles
# ---------------------------------------------------------------------------

def test_c02_fk_oracle_equivalence():
    t0 = time.perf_counter()
    chain = kin.load_chain("franka")
    rng = np.random.default_rng(2)
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(lo, hi)
        t = kin.fk_transform(chain, q)
        acc = chain.tool.copy()
        for row, qi in zip(reversed(chain.rows), reversed(q)):
            acc = kin.dh_transform(row, float(qi), chain.convention) @ acc
        worst = max(worst, float(np.max(np.abs(t - acc))))

    # planar chains against the complex-exponential closed form
    worst_planar = 0.0
    for links in ([0.5, 0.4, 0.3], [1.0, 1.0]):
        pchain = kin.planar_chain(links)
        for _ in range(50):
            q = rng.uniform(-np.pi, np.pi, size=len(links))
            pose = kin.forward_kinematics(pchain, q)
            z = sum(l * np.exp(1j * np.sum(q[: i + 1])) for i, l in enumerate(links))
            want_p = np.array([z.real, z.imag, 0.0])
            s = np.sum(q)
            want_R = np.array([[np.cos(s), -np.sin(s), 0.0],
                               [np.sin(s), np.cos(s), 0.0],
                               [0.0, 0.0, 1.0]])
            worst_planar = max(worst_planar,
                               float(np.max(np.abs(pose.p - want_p))),
                               float(np.max(np.abs(pose.R - want_R))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and worst_planar < 1e-12 and dt < 5.0
    verdict("C2 FK oracle equivalence", ok,
            f"100 Franka configs worst {worst:.2e} (<1e-10), planar analytic "
            f"worst {worst_planar:.2e} (<1e-12), {dt:.2f}s")


# ---------------------------------------------------------------------------
# C3: freeze contract on a 16-sample dataset
# ---------------------------------------------------------------------------

def _hash_partitions(params, partitions, names):
    import hashlib
    h = hashlib.sha256()
    for name in sorted(n for n in params if partitions[n] in names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def test_c03_freeze_contract():
    t0 = time.perf_counter()
    chain = kin.load_chain("planar3")
    fams = [family_presets()["IN_C"]]
    jp = build_dataset(chain, fams, n_trajs=1, horizon=16, n_obs=2, seed=3)
    jp16 = Dataset(kind="jp", cond=jp.cond[:16], actions=jp.actions[:16],
                   stats=NormStats.from_arrays(jp.cond[:16], jp.actions[:16]), seed=3)
    bb = BackboneConfig(kind="mlp", d_model=16, depth=2, dropout=0.0)
    cfg1 = TrainConfig(stage="stage1", backbone=bb, epochs=3, batch_size=8,
                       timesteps=5, seed=0)
    r1 = train_stage1(cfg1, jp16)

    from actionhead.checkpoint import checkpoint_from_bytes
    parent_blob = checkpoint_bytes(r1.policy.state_arrays(), r1.meta)
    parent_ck = checkpoint_from_bytes(parent_blob)

    task = make_task("pick-center")
    demos = collect_demos(task, 2, seed=9)
    obs16 = Dataset(kind="obs", cond=demos.cond[:16], actions=demos.actions[:16],
                    stats=NormStats.from_arrays(demos.cond[:16], demos.actions[:16]),
                    seed=9)
    cfg2 = TrainConfig(stage="stage2", backbone=bb, epochs=3, batch_size=8,
                       timesteps=5, seed=1)
    r2 = train_stage2(cfg2, parent_ck, obs16)

    ck2 = checkpoint_from_bytes(checkpoint_bytes(r2.policy.state_arrays(), r2.meta))
    frozen_same = (_hash_partitions(parent_ck.params, parent_ck.partitions, ("G", "FTAU"))
                   == _hash_partitions(ck2.params, ck2.partitions, ("G", "FTAU")))
    fcond_changed = (_hash_partitions(parent_ck.params, parent_ck.partitions, ("FCOND",))
                     != _hash_partitions(ck2.params, ck2.partitions, ("FCOND",)))
    counts = r2.policy.param_counts()
    trainable = sum(p.size for p in r2.policy.store.trainable())
    count_ok = trainable == counts["PHI"] + counts["FCOND"] and counts["PHI"] > 0
    dt = time.perf_counter() - t0
    ok = frozen_same and fcond_changed and count_ok and dt < 60.0
    verdict("C3 freeze contract", ok,
            f"G/FTAU byte-identical={frozen_same}, FCOND changed={fcond_changed}, "
            f"trainable==|PHI|+|FCOND|=={count_ok} ({trainable} params), {dt:.1f}s")


# ---------------------------------------------------------------------------
# C8: throughput orderings
# ---------------------------------------------------------------------------

def test_c08_throughput_ordering():
    t0 = time.perf_counter()
    meds = {}
    for kind in ("mlp", "conv_unet", "transformer_xattn", "transformer_film"):
        nrm, dec = bench_pair(kind, batch_size=32, n_timed=10, warmup=3, windows=5, seed=0)
        meds[kind] = (nrm.iters_per_s, dec.iters_per_s)
    dec_ok = all(d >= 1.02 * n for n, d in meds.values())
    mlp_vs_conv = meds["mlp"][0] >= 1.02 * meds["conv_unet"][0]
    dt = time.perf_counter() - t0
    lines = ", ".join(f"{k} {n:.1f}->{d:.1f}/s" for k, (n, d) in meds.items())
    ok = dec_ok and mlp_vs_conv and dt < 300.0
    verdict("C8 throughput ordering", ok,
            f"decoupled>=normal+2% for all={dec_ok}, mlp>conv+2%={mlp_vs_conv} "
            f"[{lines}], {dt:.0f}s")


# ---------------------------------------------------------------------------
# C9: diffusion sanity
# ---------------------------------------------------------------------------

def test_c09_diffusion_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    target = rng.uniform(-0.8, 0.8, size=(8, 10)).astype(np.float32)
    actions = np.tile(target, (8, 1, 1))
    cond = np.tile(rng.uniform(-1, 1, (1, 2, 5)).astype(np.float32), (8, 1, 1))
    ds = Dataset(kind="obs", cond=cond, actions=actions,
                 stats=NormStats.from_arrays(cond, actions), seed=0)
    bb = BackboneConfig(kind="mlp", horizon=8, d_model=48, depth=2, dropout=0.0)
    cfg = TrainConfig(stage="normal", backbone=bb, epochs=1500, batch_size=8,
                      timesteps=10, lr=5e-3, lr_schedule="cosine", seed=0)
    res = train_normal(cfg, ds)
    chunk = res.policy.sample_actions(cond[:1], res.schedule,
                                      np.random.default_rng(1), sampler="ddim", k=10)
    recon = res.policy.stats.denormalize_action(chunk[0])
    worst = float(np.max(np.abs(recon - target)))

    # forward-process moments at a mid schedule step
    sched = make_schedule(100, "squaredcos")
    x0 = np.full((20000, 4, 2), 0.5, dtype=np.float32)
    taus = np.full(20000, 40)
    noise = np.random.default_rng(3).standard_normal(x0.shape).astype(np.float32)
    xt = q_sample(x0, taus, noise, sched)
    ab = float(sched.alpha_bars[40])
    want_mean = np.sqrt(ab) * 0.5
    want_var = 1.0 - ab
    mean_err = abs(float(xt.mean()) - want_mean) / abs(want_mean)
    var_err = abs(float(xt.var()) - want_var) / want_var
    dt = time.perf_counter() - t0
    ok = worst < 0.05 and mean_err < 0.05 and var_err < 0.05 and dt < 60.0
    verdict("C9 diffusion sanity", ok,
            f"constant-chunk recon worst {worst:.3f} (<0.05), q_sample moment errs "
            f"{mean_err:.3f}/{var_err:.3f} (<0.05), {dt:.1f}s")


# ---------------------------------------------------------------------------
# C10: determinism
# ---------------------------------------------------------------------------

def test_c10_determinism():
    t0 = time.perf_counter()
    chain = kin.load_chain("planar3")
    fams = [family_presets()["IN_C"]]
    d1 = build_dataset(chain, fams, n_trajs=2, horizon=8, n_obs=2, seed=5)
    d2 = build_dataset(chain, fams, n_trajs=2, horizon=8, n_obs=2, seed=5)
    data_ok = dataset_bytes(d1) == dataset_bytes(d2)

    task = make_task("reach-left")
    m1 = collect_demos(task, 2, seed=4)
    m2 = collect_demos(task, 2, seed=4)
    demo_ok = dataset_bytes(m1) == dataset_bytes(m2)

    obs = Dataset(kind="obs", cond=m1.cond[:16], actions=m1.actions[:16],
                  stats=NormStats.from_arrays(m1.cond[:16], m1.actions[:16]),
                  seed=4)
    bb = BackboneConfig(kind="mlp", d_model=16, depth=2, dropout=0.1)
    cfg = TrainConfig(stage="normal", backbone=bb, epochs=2, batch_size=8,
                      timesteps=5, seed=6)
    rA = train_normal(cfg, obs)
    rB = train_normal(cfg, obs)
    ck_ok = (checkpoint_bytes(rA.policy.state_arrays(), rA.meta)
             == checkpoint_bytes(rB.policy.state_arrays(), rB.meta))

    from actionhead.checkpoint import checkpoint_from_bytes
    ck = checkpoint_from_bytes(checkpoint_bytes(rA.policy.state_arrays(), rA.meta))
    e1 = evaluate(ck, task, n_rollouts=3, seeds=(0, 1), k=5)
    e2 = evaluate(ck, task, n_rollouts=3, seeds=(0, 1), k=5)
    eval_ok = e1.to_dict() == e2.to_dict()

    b1 = run_bench("mlp", "normal", batch_size=16, n_timed=10, warmup=2, windows=3, seed=0)
    b2 = run_bench("mlp", "normal", batch_size=16, n_timed=10, warmup=2, windows=3, seed=0)
    bench_ok = abs(b1.iters_per_s - b2.iters_per_s) <= 0.10 * max(b1.iters_per_s, b2.iters_per_s)
    dt = time.perf_counter() - t0
    ok = data_ok and demo_ok and ck_ok and eval_ok and bench_ok
    verdict("C10 determinism", ok,
            f"dataset={data_ok}, demos={demo_ok}, checkpoint={ck_ok}, eval={eval_ok}, "
            f"bench within 10%={bench_ok}, {dt:.1f}s")
