"""End-to-end acceptance suite, one test per criterion.

All tests share one session pipeline built through the CLI command layer
with default settings: 1,000 synthetic 64x64 training faces, a trained toy
generator M_o, 200 PGD-protected held-out faces, a bypass patch, a control
patch trained without the adversarial term, and a defensive patch. Each
test records a PASS/FAIL line that the terminal summary prints (see
conftest.py); the assertions below use the stated tolerances unchanged.
"""

import json
import time

import pytest
import torch

from lorapatch import cli
from lorapatch.attacks import DisruptionObjective, protect
from lorapatch.dataio import load_folder
from lorapatch.errors import ChecksumError, PatchFormatError
from lorapatch.finetune import total_loss
from lorapatch.metrics import (
    DsrConfig,
    build_report,
    dsr,
    dsr_from_distances,
    evaluate_pair,
    fid,
    l2_distance,
    per_image_l2,
    ssim,
)
from lorapatch.model_zoo import (
    GeneratorSpec,
    build_feature_extractor,
    build_semantic_encoder,
    build_toy_generator,
    freeze,
)
from lorapatch.patchio import load_patch, patch_from_bytes, patch_to_bytes
from lorapatch.surgery import (
    adapter_parameter_count,
    apply_patch,
    enumerate_patchable_layers,
    inject,
    trainable_parameters,
)
from lorapatch.watermark import apply_watermark, watermark_score

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, tuple[bool, str]] = {}
TAU = 0.05


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} - {detail}")


@torch.no_grad()
def outputs(model, x, batch_size=50):
    model.eval()
    return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


class Pipeline:
    """Lazily built shared artefacts; every stage runs at most once per session."""

    def __init__(self, root):
        self.root = root
        self.cfg = cli.RunConfig()
        self.config_path = root / "config.json"
        self.config_path.write_text(json.dumps(self.cfg.to_dict()))
        self.timings: dict[str, float] = {}
        self._cache: dict[str, object] = {}

    def _once(self, key, fn):
        if key not in self._cache:
            t = time.time()
            self._cache[key] = fn()
            self.timings[key] = time.time() - t
        return self._cache[key]

    def data(self):
        def build():
            d = self.cfg.data
            cli.cmd_synth_data(self.cfg, d.n_train, d.image_size, d.train_seed, self.root / "train")
            cli.cmd_synth_data(self.cfg, d.n_test, d.image_size, d.test_seed, self.root / "test")
            size = d.image_size
            return load_folder(self.root / "train", size=size), load_folder(self.root / "test", size=size)
        return self._once("data", build)

    def model(self):
        def build():
            self.data()
            gen, mse = cli.cmd_train_gen(self.cfg, self.root / "train", self.root / "generator")
            return freeze(gen), mse
        return self._once("model", build)

    def desired(self):
        return self._once("desired", lambda: outputs(self.model()[0], self.data()[1].images))

    def protected(self):
        def build():
            gen, _ = self.model()
            return protect(gen, self.data()[1], self.cfg.attack)
        return self._once("protected", build)

    def patch(self, name, *flags):
        def build():
            self.model()
            out = self.root / name
            code = cli.main(["patch-train", "--config", str(self.config_path), "--model",
                             str(self.root / "generator"), "--data", str(self.root / "train"),
                             *flags, "--out", str(out)])
            assert code == 0, f"patch-train {name} exited {code}"
            patch = load_patch(out / cli.PATCH_FILE)
            return patch, apply_patch(self.model()[0], patch), out
        return self._once(f"patch:{name}", build)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    torch.set_num_threads(1)
    return Pipeline(tmp_path_factory.mktemp("acceptance"))


# 1 -------------------------------------------------------------------------

def test_c01_identity_at_init(pipeline):
    gen, _ = pipeline.model()
    x = pipeline.data()[1].images[:100]
    t = time.time()
    patched = inject(gen, rank=8)
    diff = (outputs(patched, x) - outputs(gen, x)).abs().max().item()
    elapsed = time.time() - t
    ok = diff <= 1e-6 and elapsed < 60
    record(1, ok, f"max |M_p - M_o| = {diff:.2e} over 100 images ({elapsed:.1f}s)")
    assert diff <= 1e-6 and elapsed < 60


# 2 -------------------------------------------------------------------------

def test_c02_pgd_contract(pipeline):
    gen, _ = pipeline.model()
    x = pipeline.data()[1].images
    x_hat = pipeline.protected().images
    elapsed = pipeline.timings["protected"]
    eps = pipeline.cfg.attack.epsilon
    assert len(x_hat) == 200 and pipeline.cfg.attack.return_policy == "best_iterate"
    linf = (x_hat - x).flatten(1).abs().amax(1)
    with torch.no_grad():
        objective = DisruptionObjective(gen, x)
        gain = objective(x_hat) - objective(x)
    ok = bool((linf <= eps + 1e-6).all() and x_hat.min() >= -1 and x_hat.max() <= 1
              and (gain >= 0).all() and elapsed < 300)
    record(2, ok, f"max Linf {linf.max():.6f} <= {eps}, range [{x_hat.min():.3f}, {x_hat.max():.3f}], "
                  f"min objective gain {gain.min():.4f} ({elapsed:.0f}s)")
    assert ok


# 3 -------------------------------------------------------------------------

def test_c03_defense_works_pre_patch(pipeline):
    gen, mse = pipeline.model()
    d = per_image_l2(outputs(gen, pipeline.protected().images), pipeline.desired())
    rate = dsr_from_distances(d.tolist(), TAU)
    elapsed = pipeline.timings["protected"]
    ok = rate >= 0.9 and elapsed < 300
    record(3, ok, f"DSR {rate:.3f} at tau={TAU} (mean L2 {d.mean():.4f}; M_o held-out MSE {mse:.4f})")
    assert rate >= 0.9 and elapsed < 300


# 4 -------------------------------------------------------------------------

def test_c04_bypass_post_patch(pipeline):
    gen, _ = pipeline.model()
    patch, patched, out = pipeline.patch("bypass")
    cfg = pipeline.cfg.finetune
    assert (cfg.rank, cfg.epsilon, cfg.lambda1, cfg.lambda2, cfg.batch_size, cfg.epochs) == (8, 0.05, 0.1, 0.1, 4, 1)
    assert json.loads((out / cli.RUN_MANIFEST).read_text())["inputs"]["data"]["n"] == 1000
    y = pipeline.desired()
    x_hat = pipeline.protected().images
    d_patched = per_image_l2(outputs(patched, x_hat), y)
    d_base = per_image_l2(outputs(gen, x_hat), y)
    rate = dsr_from_distances(d_patched.tolist(), TAU)
    ratio = (d_patched.mean() / d_base.mean()).item()
    benign = ssim(outputs(patched, pipeline.data()[1].images), y)
    elapsed = pipeline.timings["patch:bypass"]
    ok = rate <= 0.2 and ratio <= 0.2 and benign >= 0.9 and elapsed < 7200
    record(4, ok, f"(a) DSR {rate:.3f} <= 0.2; (b) L2 {d_patched.mean():.4f} = {ratio:.3f} x unpatched "
                  f"{d_base.mean():.4f}; (c) benign SSIM {benign:.4f}; train {elapsed / 60:.1f} min")
    assert rate <= 0.2
    assert ratio <= 0.2
    assert benign >= 0.9
    assert elapsed < 7200


# 5 -------------------------------------------------------------------------

def test_c05_leakage_robustness(pipeline):
    t = time.time()
    _, patched, _ = pipeline.patch("bypass")
    _, control, _ = pipeline.patch("control", "--no-adversarial")
    test = pipeline.data()[1]
    y = pipeline.desired()
    rates = {}
    for name, model in (("patched", patched), ("control", control)):
        x_hat = protect(model, test, pipeline.cfg.attack).images
        rates[name] = dsr_from_distances(per_image_l2(outputs(model, x_hat), y).tolist(), TAU)
    gap = rates["control"] - rates["patched"]
    elapsed = time.time() - t - pipeline.timings.get("patch:control", 0)
    ok = rates["patched"] < rates["control"] and gap >= 0.2 and elapsed < 1200
    record(5, ok, f"leakage DSR patched {rates['patched']:.3f} vs control {rates['control']:.3f} "
                  f"(gap {gap:.3f})")
    assert rates["patched"] < rates["control"] and gap >= 0.2
    assert elapsed < 1200


# 6 -------------------------------------------------------------------------

def test_c06_defensive_mode(pipeline):
    _, patched, _ = pipeline.patch("defensive", "--mode", "defensive")
    wm = pipeline.cfg.watermark.build(pipeline.cfg.data.image_size)
    y_w = apply_watermark(pipeline.desired(), wm)
    lines, ok = [], True
    for name, x in (("benign", pipeline.data()[1].images), ("protected", pipeline.protected().images)):
        out = outputs(patched, x)
        scores = torch.tensor([watermark_score(o, wm) for o in out])
        frac = (scores >= 0.8).float().mean().item()
        l2 = l2_distance(out, y_w)
        ok &= frac >= 0.95 and l2 <= 0.02
        lines.append(f"{name}: {frac:.3f} scored >= 0.8, L2(out, y_w) {l2:.4f}")
    elapsed = pipeline.timings["patch:defensive"]
    ok &= elapsed < 1800
    record(6, ok, "; ".join(lines) + f"; train {elapsed / 60:.1f} min")
    assert ok


# 7 -------------------------------------------------------------------------

def test_c07_efficiency_ratio():
    gen = build_toy_generator(GeneratorSpec())
    layers = enumerate_patchable_layers(gen)
    closed_form = sum(d.out_channels * 8 + 8 * d.in_channels * d.kernel[0] * d.kernel[1] + 1 for d in layers)
    counted = adapter_parameter_count(layers, 8)
    live = sum(p.numel() for p in trainable_parameters(inject(gen, rank=8)))
    total = sum(p.numel() for p in gen.parameters())
    ratio = counted / total
    ok = closed_form == counted == live and ratio <= 0.10
    record(7, ok, f"{counted} patch params / {total} generator params = {ratio:.2%}")
    assert closed_form == counted == live
    assert ratio <= 0.10


# 8 -------------------------------------------------------------------------

def test_c08_gradient_correctness():
    t = time.time()
    spec = GeneratorSpec(base_width=4, num_downsample=1, num_residual=1, num_upsample=1, seed=2, edge_kernel=3)
    base = freeze(build_toy_generator(spec)).double()
    patched = inject(base, rank=2, seed=4).double()
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in trainable_parameters(patched):
            if p.ndim:
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
            else:
                p.fill_(0.7)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x_adv = (x + (torch.rand(x.shape, generator=g, dtype=torch.float64) - 0.5) * 0.1).clamp(-1, 1)
    with torch.no_grad():
        y = base(x)
    f = build_feature_extractor(out_dim=16, seed=3).double()
    e = build_semantic_encoder(out_dim=8, feature_dim=16, seed=5).double()

    def loss():
        return total_loss(patched(x), patched(x_adv), y, f, e, 0.1, 0.1)

    params = trainable_parameters(patched)
    grads = torch.autograd.grad(loss(), params)
    h, worst, checked = 1e-6, 0.0, 0
    for p, gr in zip(params, grads):
        flat, gflat = p.data.view(-1), gr.view(-1)
        picks = torch.randperm(flat.numel(), generator=g)[:4].tolist()
        for i in picks:
            old = flat[i].item()
            flat[i] = old + h
            lp = loss().item()
            flat[i] = old - h
            lm = loss().item()
            flat[i] = old
            num, ana = (lp - lm) / (2 * h), gflat[i].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-9))
            checked += 1
    elapsed = time.time() - t
    ok = worst <= 1e-3 and elapsed < 60
    record(8, ok, f"{checked} sampled g/A/B entries, worst relative error {worst:.2e}")
    assert worst <= 1e-3 and elapsed < 60


# 9 -------------------------------------------------------------------------

def test_c09_metric_identities():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(8, 3, 32, 32, generator=g) * 2 - 1
    checks = {
        "l2(a,a)=0": l2_distance(a, a) == 0.0,
        "ssim(a,a)=1": abs(ssim(a, a) - 1.0) <= 1e-9,
        "fid(S,S)<=1e-4": fid(a, a, build_feature_extractor(out_dim=8, seed=3)).value <= 1e-4,
    }
    noisy = (a + torch.randn(a.shape, generator=g) * 0.3).clamp(-1, 1)
    taus = [0.001, 0.01, 0.05, 0.1, 0.5]
    rates = [dsr(noisy, a, DsrConfig(t)) for t in taus]
    checks["tau-monotone"] = all(r1 >= r2 for r1, r2 in zip(rates, rates[1:]))
    checks["dsr{0.01,0.06,0.20}=2/3"] = dsr_from_distances([0.01, 0.06, 0.20], 0.05) == 2 / 3
    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


# 10 ------------------------------------------------------------------------

def test_c10_patch_roundtrip(pipeline):
    patch, _, out = pipeline.patch("bypass")
    data = (out / cli.PATCH_FILE).read_bytes()
    again = patch_from_bytes(data)
    exact = all(
        torch.equal(patch.blocks[k].A, again.blocks[k].A) and torch.equal(patch.blocks[k].B, again.blocks[k].B)
        and patch.blocks[k].gate == again.blocks[k].gate
        for k in patch.blocks)
    exact &= patch_to_bytes(again) == data
    detected = 0
    positions = list(range(0, len(data), max(1, len(data) // 64))) + [len(data) - 1]
    for pos in positions:
        bad = bytearray(data)
        bad[pos] ^= 0x5A
        try:
            patch_from_bytes(bytes(bad))
        except (ChecksumError, PatchFormatError):
            detected += 1
    ok = exact and detected == len(positions)
    record(10, ok, f"bit-exact roundtrip {exact}; {detected}/{len(positions)} single-byte corruptions detected")
    assert exact and detected == len(positions)


# 11 ------------------------------------------------------------------------

def test_c11_ablation_hooks(pipeline):
    t = time.time()
    _, _, gated_dir = pipeline.patch("bypass")
    gated_trace = (gated_dir / "trace.csv").read_text().splitlines()
    gated_finite = json.loads((gated_dir / cli.RUN_MANIFEST).read_text())["outputs"]["all_finite"]
    emitted = {}
    for name, flag in (("no_gating", "--no-gating"), ("no_mmfa", "--no-mmfa")):
        _, _, out = pipeline.patch(name, flag)
        emitted[name] = len((out / "trace.csv").read_text().splitlines()) - 1
    y = pipeline.desired()
    x_hat = pipeline.protected().images
    rows = []
    for rank in (4, 8, 16):
        # The default run is the rank-8 member of the sweep.
        _, patched, _ = pipeline.patch("bypass") if rank == 8 else pipeline.patch(f"rank{rank}", "--rank", str(rank))
        rows.append(evaluate_pair(outputs(patched, x_hat), y, "pgd", f"rank={rank}", "toy", "standard", TAU))
    report = build_report(rows, title="rank sweep")
    report.write(pipeline.root / "rank_report")
    n_rows = len(report.csv.strip().splitlines()) - 1
    elapsed = time.time() - t
    ok = (gated_finite and len(gated_trace) > 1 and all(v > 0 for v in emitted.values())
          and n_rows == 3 and elapsed < 5400)
    ranks = ", ".join(f"r{r.bypass.split('=')[1]} DSR {r.dsr:.2f}" for r in rows)
    record(11, ok, f"gated losses all finite: {gated_finite}; trace rows {emitted}; "
                   f"rank report {n_rows} rows ({ranks})")
    assert gated_finite and len(gated_trace) > 1
    assert all(v > 0 for v in emitted.values())
    assert n_rows == 3
    assert elapsed < 5400
