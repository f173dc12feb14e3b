"""Acceptance suite: one group of tests per criterion, summarised by the
conftest hook as one PASS/FAIL line each.

The trained-model criteria share a session fixture that runs the smoke
pipeline through the CLI (about an hour on one core). Set
RETGAN_ACCEPTANCE_DIR to keep its artifacts between runs; stages whose
outputs already exist there are not rerun.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from retgan import cli
from retgan import gantrain as gt
from retgan import numerics as nx
from retgan.embedder import contrastive_loss, encode_images, encode_texts, init_encoders, split_recall
from retgan.encoding import HYPER_OUT, EncoderBundle
from retgan.evalmetrics import REPORT_KEYS, frechet_from_stats, frechet_proxy, parse_report
from retgan.inference import (Model, OptimConfig, latent_optimize, percept_proxy, sample_latent_stats,
                              sample_latents, synthesize)
from retgan.numerics import Rng, Tensor, grad_check_report
from retgan.retrieval import build_map, build_similarity_matrix, cosine_similarity, topk_map
from retgan.synthcorpus import generate_corpus

SMOKE_CFG = Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg"
HYPER_L1 = "Ret-Hyper-L1"


def consts(store):
    return {k: Tensor(v) for k, v in store.items()}


# ------------------------------------------------------------ smoke fixture

@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    root = Path(os.environ.get("RETGAN_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("smoke"))
    root.mkdir(parents=True, exist_ok=True)
    corpus, ckpt, abl = root / "corpus", root / "ckpt", root / "ablation"
    cfg = str(SMOKE_CFG)

    def stage(done: Path, *argv):
        if done.exists():
            return None
        t0 = time.perf_counter()
        code = cli.main([str(a) for a in argv])
        assert code == 0, f"{argv[0]} exited with {code}"
        return time.perf_counter() - t0

    stage(corpus / "manifest.txt", "gen-corpus", "--config", cfg, "--out-dir", corpus)
    stage(corpus / cli.TEXT_EMBEDS_FILE, "pretrain-embed", "--config", cfg, "--corpus-dir", corpus)
    stage(corpus / "map.gmap", "build-index", "--config", cfg, "--corpus-dir", corpus)
    seconds = stage(ckpt / "final.ntck", "train", "--config", cfg, "--corpus-dir", corpus, "--out", ckpt)
    if seconds is not None:
        (root / "train_seconds.txt").write_text(f"{seconds}\n")
    stage(root / "report.txt", "eval", "--config", cfg, "--ckpt", ckpt, "--corpus-dir", corpus,
          "--report", root / "report.txt")
    stage(abl / "ablation.txt", "ablate", "--config", cfg, "--corpus-dir", corpus, "--out-dir", abl)

    corpus_obj, data = cli.train_data(corpus, corpus / "map.gmap")
    return dict(root=root, corpus=corpus_obj, data=data, ckpt=ckpt / "final.ntck", abl=abl,
                model=Model.from_checkpoint(ckpt / "final.ntck"))


# ----------------------------------------------- 1: gradient soundness

@pytest.mark.criterion(1, "gradient soundness (finite differences, batch 2, under 2 minutes)")
def test_gradient_soundness():
    t0 = time.perf_counter()
    corpus = generate_corpus(21, 12, 4)
    enc = init_encoders(3)
    for v in enc.values():
        v.setflags(write=False)
    pool = corpus.train_images
    v_all, t_all = encode_images(enc, corpus.images), encode_texts(enc, corpus.captions)
    data = gt.TrainData(corpus.images[pool], v_all[pool], t_all, build_map(t_all, v_all[pool], 5),
                        corpus.caption_ids("train"), enc)
    r = np.random.default_rng(0)
    failures, checked = [], []

    def check(label, fn, store, coords=4):
        rep = grad_check_report(fn, store, eps=1e-5, max_coords=coords, seed=len(checked))
        checked.append((label, sorted(rep.per_param)))
        if not rep.max_rel_err <= 1e-4:
            failures.append((label, rep.worst))

    # contrastive pretraining loss over both embedding towers
    idx = pool[:2]
    caps = [corpus.captions[2 * i] for i in idx]
    check("embedder/contrastive", lambda p: contrastive_loss(p, corpus.images[idx], caps, 0.1), dict(enc), 6)

    for mode in ("direct", "hyper"):
        for guidance in ("l1", "contrastive"):
            cfg = gt.TrainConfig(batch=2, encoder_mode=mode, guidance=guidance)
            store = gt.init_model(cfg)
            for k in store:          # leave the init point so every layer carries signal
                store[k] = store[k] + r.normal(size=store[k].shape) * 0.01
            batch = gt.sample_batch(data, cfg, Rng(5, mode + guidance))
            g_side = {k: v for k, v in store.items() if k.startswith("g_")}
            d_side = {k: v for k, v in store.items() if k.startswith("d_")}
            d_const = consts(d_side)
            if guidance == "l1":
                check(f"{mode}/L_gen", lambda p: gt.generator_losses({**p, **d_const}, data, batch, cfg)["gen"],
                      g_side)
                fake = r.uniform(size=(2, 32, 32, 3))
                check(f"{mode}/L_D", lambda p: gt.discriminator_losses(p, data, batch, cfg, fake), d_side)
            check(f"{mode}/L_guide-{guidance}",
                  lambda p: gt.generator_losses({**p, **d_const}, data, batch, cfg)["guide"], g_side)

    cfg = gt.TrainConfig()
    syn = {k: v for k, v in gt.init_model(cfg).items() if k.startswith("g_syn/")}
    ref = corpus.images[:2].reshape(2, -1)
    feat = encode_images(enc, corpus.images[:2])
    enc_t = consts(enc)
    check("L_percept-proxy", lambda p: percept_proxy(enc_t, gt.synthesis_forward(p, p["w"]), ref, feat),
          {"w": r.normal(size=(2, gt.W_DIM)), **syn})

    elapsed = time.perf_counter() - t0
    covered = {name for _, names in checked for name in names}
    for group in ("enc_img/", "enc_txt/", "g_map/", "g_syn/", "d_trunk/", "d_head/", "g_enc/wv", "g_enc/h_w1",
                  "d_enc/wv", "d_enc/h_w1"):
        assert any(n.startswith(group) for n in covered), f"{group} never probed"
    print(f"gradient checks: {len(checked)} losses, {len(covered)} tensors, {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 120


# ----------------------------------------------- 2: retrieval exactness

def brute_topk(sim, k):
    out = []
    for row in sim:
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order[:k])
    return np.array(out)


@pytest.mark.criterion(2, "retrieval exactness (top-K oracle, cosine identities)")
def test_retrieval_topk_oracle():
    r = np.random.default_rng(1)
    t, v = r.normal(size=(200, 256)), r.normal(size=(500, 256))
    v[7] = v[3]                                    # exact tie, resolved by lower index
    sim = build_similarity_matrix(t, v)
    np.testing.assert_array_equal(topk_map(sim, 5).indices, brute_topk(sim, 5))


@pytest.mark.criterion(2, "retrieval exactness (top-K oracle, cosine identities)")
def test_cosine_identities():
    u = np.random.default_rng(2).normal(size=256)
    w = np.random.default_rng(3).normal(size=256)
    w -= (w @ u) / (u @ u) * u
    assert abs(cosine_similarity(u, u) - 1) < 1e-12
    assert abs(cosine_similarity(u, -u) + 1) < 1e-12
    assert abs(cosine_similarity(u, w)) < 1e-12


# ----------------------------------------------- 3: hypernetwork contract

@pytest.mark.criterion(3, "hypernetwork contract (output length, composition oracle)")
def test_hypernet_contract():
    bundle = EncoderBundle("h", "hyper")
    store = bundle.init_params(Rng(4, "h"))
    r = np.random.default_rng(4)
    store["h/h_b1"] = r.normal(size=HYPER_OUT) * 0.01
    store["h/bv"] = r.normal(size=128) * 0.1
    p = consts(store)
    t, v = r.normal(size=(100, 256)), r.normal(size=(100, 256))
    flat = nx.linear(nx.relu(nx.linear(Tensor(t), p["h/h_w0"], p["h/h_b0"])), p["h/h_w1"], p["h/h_b1"]).data
    assert HYPER_OUT == 32768 and flat.shape == (100, 32768)
    expect = np.stack([v[i] @ flat[i].reshape(256, 128) for i in range(100)]) + store["h/bv"]
    got = bundle.encode_visual_hyper(p, Tensor(v), Tensor(t)).data
    assert np.max(np.abs(got - expect)) < 1e-12
    rep = grad_check_report(lambda q: nx.sum(nx.tanh(bundle.encode_visual_hyper(q, Tensor(v[:2]), Tensor(t[:2])))),
                            store, max_coords=6)
    assert {"h/h_w0", "h/h_b0", "h/h_w1", "h/h_b1"} <= set(rep.per_param) and rep.max_rel_err < 1e-4


# ----------------------------------------------- 4: loss oracles

@pytest.mark.criterion(4, "loss oracles")
def test_loss_oracles():
    zero = Tensor(np.zeros(4))
    assert abs(gt.disc_loss(zero, zero).item() - 2 * math.log(2)) < 1e-9
    assert abs(gt.gen_adv_loss(zero, "nonsaturating").item() - math.log(2)) < 1e-9
    f = np.random.default_rng(5).normal(size=(6, 256))
    assert gt.guide_l1(Tensor(f), f).item() == 0.0
    same = np.tile(f[:1], (6, 1))
    # both directions of the symmetric loss equal ln(batch), so does their mean
    assert abs(gt.guide_contrastive(Tensor(same), same, 0.1).item() - math.log(6)) < 1e-9
    g, u = Tensor(np.array(0.625)), Tensor(np.array(0.3125))
    assert gt.TrainConfig().lam == 1.0
    assert gt.total_g_loss(g, u, gt.TrainConfig().lam).item() == 0.625 + 0.3125


# ----------------------------------------------- 5: training smoke

@pytest.mark.criterion(5, "training smoke, determinism and held-out guidance loss")
def test_smoke_run_finite_and_fast(smoke):
    lines = (smoke["ckpt"].parent / "metrics.log").read_text().splitlines()
    assert len(lines) == 2000 and lines[-1].startswith("step=2000 ")
    values = [float(kv.split("=")[1]) for line in lines for kv in line.split()[1:]]
    assert all(np.isfinite(values))
    seconds = float((smoke["root"] / "train_seconds.txt").read_text())
    print(f"2000 steps in {seconds:.0f}s")
    assert seconds < 15 * 60


@pytest.mark.criterion(5, "training smoke, determinism and held-out guidance loss")
def test_smoke_run_bit_identical(smoke):
    # the ablation's hyper/L1 row trains the same config from scratch
    twin = smoke["abl"] / HYPER_L1 / "final.ntck"
    assert gt.load_checkpoint(twin).cfg == gt.load_checkpoint(smoke["ckpt"]).cfg
    assert twin.read_bytes() == smoke["ckpt"].read_bytes()


@pytest.mark.criterion(5, "training smoke, determinism and held-out guidance loss")
def test_heldout_guidance_drops(smoke):
    model, data, corpus = smoke["model"], smoke["data"], smoke["corpus"]
    test_caps = corpus.caption_ids("test")
    before = gt.heldout_guide(gt.init_model(model.cfg), data, model.cfg, test_caps)
    after = gt.heldout_guide(model.params, data, model.cfg, test_caps)
    print(f"held-out L_guide: step 0 {before:.4f}, step 2000 {after:.4f} ({after / before:.1%})")
    assert after <= 0.7 * before


# ----------------------------------------------- 6: diversity direction

@pytest.mark.criterion(6, "diversity increases with varied references")
def test_diversity_direction(smoke):
    rep = parse_report((smoke["root"] / "report.txt").read_text())
    print({k: rep[k] for k in ("d_l2_a", "d_l2_b", "ratio_l2", "d_feat_a", "d_feat_b", "ratio_feat")})
    assert rep["d_l2_a"] > 0 and rep["d_feat_a"] > 0
    assert rep["ratio_l2"] > 1.0 and rep["ratio_feat"] > 1.0


# ----------------------------------------------- 7: latent optimization

@pytest.mark.criterion(7, "latent optimization recovers a synthesized target")
def test_latent_optimization(smoke):
    model, corpus = smoke["model"], smoke["corpus"]
    before = model.checksum()
    caps = corpus.caption_ids("test")[::40][:10]
    rng = Rng(7, "hidden-w")
    ratios, traces = [], []
    for i, c in enumerate(caps):
        ref_idx = int(rng.integers(model.pool_size, 1)[0])
        w_star = sample_latents(model, model.text_embedding(corpus.captions[c]), model.reference(ref_idx), 1,
                                seed=1000 + i)[0]
        res = latent_optimize(model, corpus.captions[c], synthesize(model, w_star)[0],
                              OptimConfig(lr=0.02, beta1=0.9, beta2=0.999, iterations=300), ref_index=ref_idx)
        ratios.append(res.losses[-1] / res.losses[0])
        traces.append(res.losses)
    print("final/initial per trial:", ", ".join(f"{x:.2e}" for x in ratios))
    assert np.median(ratios) < 0.1
    assert model.checksum() == before
    # median trace averaged over 30-iteration windows never goes up
    windows = np.median(traces, axis=0)[:300].reshape(10, 30).mean(axis=1)
    assert np.all(np.diff(windows) <= 0), windows


def test_pretrained_encoders_retrieve(smoke):
    corpus = smoke["corpus"]
    recall = split_recall(smoke["data"].encoders, corpus, 5)
    print(f"test recall@5 of the frozen encoders: {recall:.4f}")
    assert recall >= 0.6


# ----------------------------------------------- 8: latent statistics

@pytest.mark.criterion(8, "latent statistics match a streaming oracle")
def test_latent_stats(smoke):
    model, corpus = smoke["model"], smoke["corpus"]
    cap = corpus.captions[int(corpus.caption_ids("test")[0])]
    stats = sample_latent_stats(model, cap, 0)
    assert stats.count == 10000
    w = sample_latents(model, model.text_embedding(cap), model.reference(0), 10000)
    n, mean, m2 = 0, np.zeros(gt.W_DIM), np.zeros(gt.W_DIM)
    for x in w:
        n += 1
        d = x - mean
        mean += d / n
        m2 += d * (x - mean)
    np.testing.assert_allclose(stats.mean, mean, rtol=0, atol=1e-9)
    np.testing.assert_allclose(stats.std, np.sqrt(m2 / n), rtol=0, atol=1e-9)


# ----------------------------------------------- 9: frechet numerics

@pytest.mark.criterion(9, "Frechet proxy numerics")
def test_frechet_numerics():
    r = np.random.default_rng(9)
    x = r.normal(size=(500, 32))
    assert abs(frechet_proxy(x, x).value) < 1e-8

    shift = np.full(16, 0.75)
    a, b = r.normal(size=(5000, 16)), r.normal(size=(5000, 16)) + shift
    assert abs(frechet_proxy(a, b).value - shift @ shift) < 0.05 * (shift @ shift)

    da, db = r.uniform(0.2, 2, 20), r.uniform(0.2, 2, 20)
    ma, mb = r.normal(size=20), r.normal(size=20)
    closed = np.sum((ma - mb) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
    assert abs(frechet_from_stats(ma, np.diag(da), mb, np.diag(db)) - closed) < 1e-6

    p, q = r.normal(size=(300, 12)), r.normal(size=(400, 12)) * 1.5 + 0.3
    assert abs(frechet_proxy(p, q).value - frechet_proxy(q, p).value) < 1e-8


# ----------------------------------------------- 10: ablation harness

@pytest.mark.criterion(10, "ablation harness emits four populated rows")
def test_ablation_table(smoke):
    lines = (smoke["abl"] / "ablation.txt").read_text().splitlines()
    assert lines[0].split() == ["variant", *REPORT_KEYS]
    rows = {l.split()[0]: [float(x) for x in l.split()[1:]] for l in lines[1:]}
    assert list(rows) == ["Ret", "Ret-L1", "Ret-Contrast", HYPER_L1]
    for name, vals in rows.items():
        assert len(vals) == len(REPORT_KEYS) and all(np.isfinite(vals)), name
    for name in rows:
        assert (smoke["abl"] / name / "report.txt").exists()
