"""Acceptance criteria for the codec, one verdict line each in the terminal summary.

The desk fixture (4 views x 8 frames x 80x80, disparity 2 px, seed 7; grid
4x4, c=24, blocks [5,2,2], 300 epochs) is encoded once per configuration and
shared by the criteria that need trained models.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from acceptance_log import record
from mivec import ivc, metrics, modelzip
from mivec.bitstream.codec import CodecConfig, decode_sequence, encode_sequence
from mivec.bitstream.container import BitstreamContainer
from mivec.errors import ConfigurationError, CorruptStreamError
from mivec.inrnet import ModelConfig, init_model
from mivec.seqdata import generate_synthetic
from mivec.training import TrainConfig, joint_loss, ste, ste_quantize_params

DESK_SEQ = dict(num_views=4, num_frames=8, height=80, width=80, disparity_px=2.0, seed=7)
DESK_CODEC = CodecConfig(grid_c=24, factors=(5, 2, 2), grid_h=4, grid_w=4, train=TrainConfig(epochs=300))
ABLATIONS = {
    "full": {},
    "no_ivc": {"ivc": False},
    "no_grid_fea_v": {"grid_fea_v": False},
    "no_grid_fea_t": {"grid_fea_t": False},
}

# criterion tolerances
MIN_TRAIN_PSNR = 30.0
MAX_RUNTIME_S = 20 * 60
Q_RATIO, Q_RATIO_TOL = 4.00, 0.03
QP_RATIO_RANGE = (6.3, 6.8)
PRUNE_FRACTION = 0.4
HUFFMAN_STREAMS = 10_000
BD_IDENTICAL_TOL = 1e-6
BD_DOUBLE, BD_DOUBLE_TOL = 100.0, 0.5
PSNR_16, PSNR_TOL = 24.05, 0.01
GRAD_REL_TOL = 0.01
GRAD_PASS_FRACTION = 0.99
FD_STEP = 1e-3


@pytest.fixture(scope="session")
def desk_seq():
    return generate_synthetic(**DESK_SEQ)


@pytest.fixture(scope="session")
def desk_runs(desk_seq):
    runs = {}
    for name, flags in ABLATIONS.items():
        cfg = dataclasses.replace(DESK_CODEC, **flags)
        start = time.perf_counter()
        container, report = encode_sequence(desk_seq, cfg)
        runs[name] = (container, report, time.perf_counter() - start)
    return runs


def _implicit_psnr(report) -> float:
    return float(np.mean([v for j, v in report.view_psnr.items() if j != report.basic_view]))


def _ratio_fixtures():
    """Untrained desk-size models with distinct seeds, plus one with heavier-tailed weights."""
    models = [init_model(ModelConfig(80, 80, 8, 4, 4, 4, 24, (5, 2, 2), seed=s)) for s in range(3)]
    heavy = init_model(ModelConfig(80, 80, 8, 4, 4, 4, 24, (5, 2, 2), seed=9))
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in heavy.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)
    return models + [heavy]


def _ratio(cm) -> float:
    return modelzip.compression_ratio(cm, modelzip.serialize(cm))


def _qp_pair(model):
    mask = modelzip.prune(modelzip.flatten_quantizable(model), PRUNE_FRACTION).mask
    return modelzip.compress_model(model, mask, entropy=False), modelzip.compress_model(model, mask, entropy=True)


def _trained_qp_pair(container):
    huff = modelzip.deserialize(container.implicit)
    fixed = dataclasses.replace(huff, code_lengths=tuple(modelzip.fixed_length_table()))
    return fixed, huff


@pytest.mark.slow
def test_01_overfit_fixture(desk_runs):
    _, report, _ = desk_runs["full"]
    psnrs = report.float_view_psnr
    runtime = report.timings["train"]
    ok = len(psnrs) == 3 and min(psnrs.values()) >= MIN_TRAIN_PSNR and runtime <= MAX_RUNTIME_S
    detail = ", ".join(f"v{j} {p:.2f} dB" for j, p in sorted(psnrs.items()))
    record(1, "overfit fixture", ok, f"{detail}; train {runtime:.0f} s (need >= {MIN_TRAIN_PSNR} dB, <= {MAX_RUNTIME_S} s)")
    assert ok


def test_02_quantization_ratio():
    ratios = [_ratio(modelzip.compress_model(m, None, entropy=False)) for m in _ratio_fixtures()]
    ok = all(abs(r - Q_RATIO) <= Q_RATIO_TOL * Q_RATIO for r in ratios)
    record(2, "quantization-only ratio", ok, f"{', '.join(f'{r:.3f}' for r in ratios)} (need {Q_RATIO} +/- 3%)")
    assert ok


@pytest.mark.slow
def test_03_prune_quantize_ratio(desk_runs):
    ratios = [_ratio(_qp_pair(m)[0]) for m in _ratio_fixtures()]
    ratios.append(_ratio(_trained_qp_pair(desk_runs["full"][0])[0]))
    lo, hi = QP_RATIO_RANGE
    ok = all(lo <= r <= hi for r in ratios)
    record(3, "prune+quantize ratio", ok, f"{', '.join(f'{r:.3f}' for r in ratios)} (need [{lo}, {hi}])")
    assert ok


@pytest.mark.slow
def test_04_entropy_coding(desk_runs):
    pairs = [_qp_pair(m) for m in _ratio_fixtures()] + [_trained_qp_pair(desk_runs["full"][0])]
    gains = [(_ratio(qp), _ratio(qpe)) for qp, qpe in pairs]
    ratio_ok = all(qpe >= qp for qp, qpe in gains)

    rng = np.random.default_rng(2024)
    failures = 0
    for k in range(HUFFMAN_STREAMS):
        n = int(rng.integers(1, 400))
        kind = k % 4
        if kind == 0:
            s = rng.integers(-127, 128, n)
        elif kind == 1:
            s = np.clip(np.round(rng.laplace(0, rng.uniform(0.3, 30), n)), -127, 127)
        elif kind == 2:
            s = np.full(n, rng.integers(-127, 128))
        else:
            s = rng.choice(rng.integers(-127, 128, int(rng.integers(2, 6))), n)
        s = s.astype(np.int64)
        lengths, bits = modelzip.huffman_encode(s)
        payload = modelzip.pack_bits(bits)
        if not np.array_equal(modelzip.huffman_decode(lengths, payload, n, len(bits)), s):
            failures += 1
    ok = ratio_ok and failures == 0
    detail = "; ".join(f"Q+P {a:.3f} -> Q+P+E {b:.3f}" for a, b in gains)
    record(4, "entropy coding", ok, f"{detail}; {failures}/{HUFFMAN_STREAMS} round-trip failures")
    assert ok


def test_05_pruning_exactness():
    rng = np.random.default_rng(55)
    checks = []
    for n in (10, 97, 1000, 4099, 65537):
        mags = rng.permutation(n).astype(np.float64) + 1.0
        vals = mags * rng.choice([-1.0, 1.0], n) * 1e-4
        checks.append((n, modelzip.prune(vals, PRUNE_FRACTION)))
    # desk-model length; float32 weights tie in magnitude, so draw float64 values instead
    flat = rng.standard_normal(modelzip.flatten_quantizable(_ratio_fixtures()[0]).size)
    assert np.unique(np.abs(flat)).size == flat.size
    checks.append((flat.size, modelzip.prune(flat, PRUNE_FRACTION)))
    ok = all(r.pruned_fraction == math.floor(PRUNE_FRACTION * n) / n and (~r.mask).sum() == math.floor(PRUNE_FRACTION * n)
             for n, r in checks)
    record(5, "pruning exactness", ok, ", ".join(f"n={n}: {(~r.mask).sum()} zeroed" for n, r in checks))
    assert ok


@pytest.mark.slow
def test_06_ivc_ablation(desk_runs):
    full, no_ivc = desk_runs["full"][1], desk_runs["no_ivc"][1]
    same_budget = full.parameter_count == no_ivc.parameter_count
    a, b = _implicit_psnr(full), _implicit_psnr(no_ivc)
    ok = same_budget and a > b
    record(6, "IVC ablation direction", ok, f"full {a:.3f} dB vs --no-ivc {b:.3f} dB, {full.parameter_count} params each")
    assert ok


@pytest.mark.slow
def test_07_grid_ablation(desk_runs):
    full = _implicit_psnr(desk_runs["full"][1])
    no_v = _implicit_psnr(desk_runs["no_grid_fea_v"][1])
    no_t = _implicit_psnr(desk_runs["no_grid_fea_t"][1])
    ok = full > no_v and full > no_t
    record(7, "grid ablation direction", ok,
           f"full {full:.3f} dB, --no-grid-fea-v {no_v:.3f} dB, --no-grid-fea-t {no_t:.3f} dB")
    assert ok


def test_08_resolution_closure():
    cfg = ModelConfig.for_resolution(1080, 1920, 1, 2, 12)
    model = init_model(cfg).eval()
    with torch.no_grad():
        rgb, flow, w = model([1], [0])
    shape_ok = (
        (cfg.grid_h, cfg.grid_w) == (9, 16)
        and cfg.factors == (5, 3, 2, 2, 2)
        and rgb.shape[-2:] == (1080, 1920)
        and flow.shape[-2:] == (1080, 1920)
    )
    rejected = 0
    for bad in [(1080, 1920, 9, 15), (1080, 1920, 8, 16), (1088, 1920, 9, 16)]:
        try:
            ModelConfig(bad[0], bad[1], 1, 2, bad[2], bad[3], 12)
        except ConfigurationError:
            rejected += 1
    ok = shape_ok and rejected == 3
    record(8, "resolution closure", ok, f"output {tuple(rgb.shape[-2:])}, {rejected}/3 mismatched configs rejected")
    assert ok


def test_09_metrics_oracles():
    anchor = [metrics.RDPoint(r, q, s) for r, q, s in
              [(0.04, 29.5, 0.88), (0.09, 32.0, 0.92), (0.21, 34.8, 0.95), (0.45, 37.1, 0.97), (0.9, 39.0, 0.98)]]
    doubled = [metrics.RDPoint(p.bpp * 2, p.psnr, p.ssim) for p in anchor]
    bd0 = metrics.bd_rate(anchor, anchor).bd_rate_percent
    bd2 = metrics.bd_rate(anchor, doubled).bd_rate_percent
    base = np.random.default_rng(9).integers(0, 200, (32, 32, 3))
    p16 = metrics.psnr(base / 255.0, (base + 16) / 255.0)
    ok = abs(bd0) <= BD_IDENTICAL_TOL and abs(bd2 - BD_DOUBLE) <= BD_DOUBLE_TOL and abs(p16 - PSNR_16) <= PSNR_TOL
    record(9, "metrics oracles", ok, f"BD(identical) {bd0:.2e}%, BD(rate x2) {bd2:.4f}%, PSNR(err 16) {p16:.4f} dB")
    assert ok


@pytest.mark.slow
def test_10_bitstream_roundtrip(desk_runs):
    container, report, _ = desk_runs["full"]
    data = container.to_bytes()
    decoded = decode_sequence(data)
    identical = np.array_equal(decoded.frames, report.reconstruction)
    bytes_ok = BitstreamContainer.from_bytes(data) == container and BitstreamContainer.from_bytes(data).to_bytes() == data

    rng = np.random.default_rng(10)
    sizes = report.segment_bytes
    starts = {}
    # header block, then each segment with its length prefix and CRC, then the trailing CRC
    pos = sizes["header"] - 8 * 3 - 4
    starts["header"] = (0, pos)
    for name in ("metadata", "explicit", "implicit"):
        starts[name] = (pos, pos + sizes[name] + 8)
        pos += sizes[name] + 8
    starts["trailer"] = (pos, pos + 4)
    assert pos + 4 == len(data)
    missed, crashed, tried = 0, 0, 0
    for name, (lo, hi) in starts.items():
        for bit in rng.choice((hi - lo) * 8, size=min(64, (hi - lo) * 8), replace=False):
            bad = bytearray(data)
            bad[lo + int(bit) // 8] ^= 0x80 >> (int(bit) % 8)
            tried += 1
            try:
                decode_sequence(bytes(bad))
                missed += 1
            except CorruptStreamError:
                pass
            except Exception:  # noqa: BLE001 - any other exception counts as a crash
                crashed += 1
    ok = identical and bytes_ok and missed == 0 and crashed == 0
    record(10, "bitstream round trip", ok,
           f"bit-identical {identical}, byte-exact {bytes_ok}, {tried} bit flips: {missed} missed, {crashed} crashes")
    assert ok


def _gradcheck_setup():
    cfg = ModelConfig(12, 12, 4, 2, 3, 3, 2, (4,), seed=5)
    model = init_model(cfg).double()
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        model.refine_weight.copy_(torch.randn(model.refine_weight.shape, generator=g, dtype=torch.float64) * 0.05)
        model.aux_head_bias[:2] = 0.3  # keep sampling positions away from integer pixel kinks
        model.rgb_head_bias.fill_(0.2)
    gt = torch.rand(2, 4, 3, 12, 12, generator=g, dtype=torch.float64)
    explicit = torch.rand(4, 3, 12, 12, generator=g, dtype=torch.float64) * 0.5
    j = torch.tensor([1, 1, 1, 1])
    t = torch.tensor([0, 1, 2, 3])

    def loss_fn(params=None):
        fused = ivc.reconstruct(model, j, t, explicit, params).fused
        return joint_loss(gt[j, t], fused, 0.7)

    return model, loss_fn


def test_11_gradient_sanity():
    model, loss_fn = _gradcheck_setup()
    assert 900 <= model.parameter_count() <= 1100
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in model.parameters()])
    numeric = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + FD_STEP
                up = loss_fn().item()
                flat[k] = orig - FD_STEP
                down = loss_fn().item()
                flat[k] = orig
                numeric.append((up - down) / (2 * FD_STEP))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = torch.maximum(analytic.abs(), numeric.abs())
    both_zero = scale <= 1e-12
    passed = both_zero | ((analytic - numeric).abs() <= GRAD_REL_TOL * scale)
    fraction = passed.double().mean().item()

    # straight-through identity: injected upstream gradient arrives unchanged
    d = torch.randn(64, dtype=torch.float64, requires_grad=True)
    upstream = torch.randn(64, dtype=torch.float64)
    ste(d).backward(upstream)
    identity = torch.equal(d.grad, upstream)

    # through the whole model: grads w.r.t. raw weights equal grads w.r.t. their dequantized values
    model.zero_grad()
    ste_quantize_params(model)
    loss_fn().backward()
    raw = {n: p.grad.clone() for n, p in model.named_parameters()}
    deq = {n: tensor.detach().clone().requires_grad_(True) for n, tensor in model.effective().items()}
    model.param_transform = None
    loss_fn(deq).backward()
    model_identity = all(torch.equal(raw[n], deq[n].grad) for n in raw if model.is_quantizable(n))

    ok = fraction >= GRAD_PASS_FRACTION and identity and model_identity
    record(11, "gradient sanity", ok,
           f"{passed.sum().item()}/{passed.numel()} entries within 1% ({100 * fraction:.2f}%), "
           f"STE identity {identity and model_identity}")
    assert ok
