import numpy as np
import pytest
import torch

from facecloak.adversary import DiscriminatorSpec, build_attack_model, build_discriminator
from facecloak.dataset import LabeledImage, stack_images
from facecloak.embedder import VerificationThreshold, embed_batch, reference_table, verify
from facecloak.evaluation import (
    EvalProtocol,
    attack_success_rate,
    detectability_probe,
    embedding_shift_stats,
    evaluate_cloaker,
    make_protocol,
    robustness_under_blur,
    ssim_report,
)
from facecloak.imaging import gaussian_blur
from facecloak.training import Cloaker
from facecloak.utils import state_hash

from oracles import naive_success_rate


@pytest.fixture(scope="module")
def model(tiny_embedder):
    torch.manual_seed(0)
    m = build_attack_model(tiny_embedder, (16, 8, 8), seed=4)
    # push the generator away from zero so cloaking actually changes embeddings
    with torch.no_grad():
        m.generator.out.weight.normal_(0, 0.5)
    return m.eval()


@pytest.fixture(scope="module")
def protocol(tiny_embedder, tiny_faces, tiny_threshold):
    return make_protocol(tiny_embedder, tiny_faces["test"], tiny_threshold)


def clean_fnmr(embedder, items, p, blur=None):
    """Brute-force baseline: run verify on every clean test image."""
    misses = 0
    for d in items:
        img = d.image if blur is None else gaussian_blur(d.image, *blur)
        misses += not verify(embedder, img, p.references[d.identity_id], p.threshold)
    return misses / len(items)


class TestSuccessRate:
    def test_identity_cloaker_equals_clean_fnmr(self, tiny_embedder, tiny_faces, protocol):
        rate = attack_success_rate(tiny_embedder, Cloaker(None, 0.0), tiny_faces["test"], protocol)
        assert rate == clean_fnmr(tiny_embedder, tiny_faces["test"], protocol)

    def test_identity_cloaker_blurred(self, tiny_embedder, tiny_faces, protocol):
        rate = robustness_under_blur(tiny_embedder, Cloaker(None, 0.0), tiny_faces["test"], protocol, 1.0, 5)
        assert rate == clean_fnmr(tiny_embedder, tiny_faces["test"], protocol, blur=(1.0, 5))

    @pytest.mark.parametrize("blur", [None, (1.0, 5)])
    def test_matches_naive_loop(self, tiny_embedder, tiny_faces, protocol, model, blur):
        cloaker = Cloaker(model, 0.1)
        rate = attack_success_rate(tiny_embedder, cloaker, tiny_faces["test"], protocol, blur=blur)
        naive = naive_success_rate(tiny_embedder, lambda im: Cloaker(model, 0.1)(im[None])[0], tiny_faces["test"],
                                   protocol.references, protocol.threshold.tau, blur=blur)
        assert rate == naive
        assert 0 <= rate <= 1

    def test_targeted_matches_naive_loop(self, tiny_embedder, tiny_faces, tiny_threshold, model):
        test = tiny_faces["test"]
        tid = test[0].identity_id
        refs = reference_table(tiny_embedder, test)
        p = EvalProtocol(refs, tiny_threshold, True, refs[tid], tid)
        items = [d for d in test if d.identity_id != tid]
        rate = attack_success_rate(tiny_embedder, Cloaker(model, 0.2), test, p)
        naive = naive_success_rate(tiny_embedder, lambda im: Cloaker(model, 0.2)(im[None])[0], items, refs,
                                   tiny_threshold.tau, targeted=True, target=refs[tid])
        assert rate == naive

    def test_tiny_blur_limit(self, tiny_embedder, tiny_faces, protocol, model):
        c = Cloaker(model, 0.1)
        plain = attack_success_rate(tiny_embedder, c, tiny_faces["test"], protocol)
        assert robustness_under_blur(tiny_embedder, c, tiny_faces["test"], protocol, 1e-3, 3) == plain

    def test_orthogonal_oracle_cloaker(self):
        # embedding = the first 8 pixels of channel 0, normalised; identity k lives on axis k
        class PixelEmbedder(torch.nn.Module):
            def forward(self, x):
                v = x[:, 0, 0, :8]
                return v / v.norm(dim=1, keepdim=True)

        def image_on_axis(k):
            img = np.zeros((4, 8, 3))
            img[0, k, 0] = 1.0
            return img

        items = [LabeledImage(image_on_axis(k), k, j) for k in range(4) for j in range(2)]
        emb = PixelEmbedder()
        p = EvalProtocol(reference_table(emb, items), VerificationThreshold(1.0))
        assert attack_success_rate(emb, lambda x: x, items, p) == 0.0

        def orthogonal(x):
            out = np.zeros_like(x)
            for i, img in enumerate(x):
                k = int(np.argmax(img[0, :, 0]))
                out[i] = image_on_axis(k + 4)
            return out

        assert attack_success_rate(emb, orthogonal, items, p) == 1.0

    def test_missing_reference(self, tiny_embedder, tiny_faces, tiny_threshold):
        refs = reference_table(tiny_embedder, tiny_faces["test"][:1])
        p = EvalProtocol(refs, tiny_threshold)
        with pytest.raises(ValueError):
            attack_success_rate(tiny_embedder, Cloaker(None, 0), tiny_faces["test"], p)

    def test_references_must_be_unit(self, tiny_threshold):
        with pytest.raises(ValueError):
            EvalProtocol({0: np.array([1.0, 1.0])}, tiny_threshold)


class TestProbes:
    def test_detectability(self, tiny_faces):
        d = build_discriminator(DiscriminatorSpec((32, 32, 3)), 0)
        x = stack_images(tiny_faces["test"])
        po, pa = detectability_probe(d, x, x)
        assert po == pa and 0 <= po <= 1
        with pytest.raises(ValueError):
            detectability_probe(d, x[:0], x)

    def test_shift_stats(self, tiny_embedder, tiny_faces, protocol, model):
        x = stack_images(tiny_faces["test"])
        zero = embedding_shift_stats(tiny_embedder, x, x, protocol)
        assert zero["shift"]["max"] == 0.0
        moved = embedding_shift_stats(tiny_embedder, x, Cloaker(model, 0.2)(x), protocol)
        assert moved["shift"]["min"] >= 0
        with pytest.raises(ValueError):
            embedding_shift_stats(tiny_embedder, x, x[:-1], protocol)

    def test_ssim_report(self, tiny_faces, model):
        x = stack_images(tiny_faces["test"])
        r = ssim_report(x, x)
        assert r["mean"] == pytest.approx(1.0) and r["min"] == pytest.approx(1.0)
        r = ssim_report(x, Cloaker(model, 0.2)(x))
        assert -1 <= r["min"] <= r["mean"] <= r["max"] <= 1
        with pytest.raises(ValueError):
            ssim_report(x, x[:-1])


def test_evaluate_cloaker_row_is_consistent_and_pure(tiny_embedder, tiny_faces, protocol, model):
    before = (state_hash(tiny_embedder), state_hash(model))
    row = evaluate_cloaker("m", model, 0.1, tiny_faces["test"], tiny_embedder, protocol, tiny_embedder, protocol,
                           (1.0, 5))
    assert (state_hash(tiny_embedder), state_hash(model)) == before
    assert row.success_rate_whitebox == attack_success_rate(tiny_embedder, Cloaker(model, 0.1), tiny_faces["test"],
                                                            protocol)
    assert row.success_rate_whitebox_blurred == robustness_under_blur(tiny_embedder, Cloaker(model, 0.1),
                                                                      tiny_faces["test"], protocol)
    assert row.max_linf <= 0.1 + 1e-6
    for k in ("success_rate_whitebox", "success_rate_blackbox", "success_rate_whitebox_blurred"):
        assert 0 <= getattr(row, k) <= 1
    d = row.to_dict()
    assert d["blur"]["applied"] == "last transform before embedding"


def test_embeddings_used_by_protocol_come_from_clean_images(tiny_embedder, tiny_faces, protocol):
    items = [d for d in tiny_faces["test"] if d.identity_id == tiny_faces["test"][0].identity_id]
    mean = embed_batch(tiny_embedder, stack_images(items)).mean(axis=0)
    assert np.allclose(protocol.references[items[0].identity_id], mean / np.linalg.norm(mean))
