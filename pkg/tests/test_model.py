import numpy as np
import pytest
import torch

import singconv.model as M

N_PHONEMES = 10
N_SPEAKERS = 3


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    model = M.AcousticModel(M.ModelConfig.tiny(mel_bins=4), N_PHONEMES, N_SPEAKERS)
    model.eval()
    return model


@pytest.fixture(scope="module")
def toy_model():
    torch.manual_seed(1)
    model = M.AcousticModel(M.ModelConfig.toy(), N_PHONEMES, N_SPEAKERS)
    model.eval()
    return model


def random_inputs(cfg, durs, seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    t = sum(durs)
    return {
        "phoneme_ids": torch.randint(0, N_PHONEMES, (batch, len(durs)), generator=g),
        "speaker_ids": torch.randint(0, N_SPEAKERS, (batch,), generator=g),
        "durations": [list(durs)] * batch,
        "f0_cond": torch.randn(batch, t, 2, generator=g),
        "rmse": torch.rand(batch, t, generator=g),
        "positions": torch.rand(batch, t, generator=g),
        "targets": torch.randn(batch, t, cfg.mel_bins, generator=g),
        "frame_lengths": [t] * batch,
    }


class TestEncoder:
    @pytest.mark.parametrize("n", [1, 7])
    def test_output_shape(self, toy_model, n):
        ids = torch.randint(0, N_PHONEMES, (1, n))
        out = toy_model.encoder(ids, [n])
        assert out.shape == (1, n, toy_model.config.encoder_out_dim)

    def test_deterministic_in_eval(self, toy_model):
        ids = torch.randint(0, N_PHONEMES, (1, 5))
        a = toy_model.encoder(ids, [5])
        b = toy_model.encoder(ids, [5])
        assert torch.equal(a, b)

    def test_out_of_range_id(self, toy_model):
        with pytest.raises(ValueError, match="out of range"):
            toy_model.encoder(torch.tensor([[N_PHONEMES + 1]]), [1])


class TestSpeakerFusion:
    def test_shape(self, toy_model):
        h = torch.randn(1, 3, toy_model.config.encoder_out_dim)
        m = torch.randn(1, toy_model.config.speaker_embed_dim)
        assert toy_model.fusion(h, m).shape == (1, 3, toy_model.config.fused_dim)

    def test_different_speakers_differ(self, toy_model):
        torch.manual_seed(4)
        h = torch.randn(1, 4, toy_model.config.encoder_out_dim)
        m1 = torch.randn(1, toy_model.config.speaker_embed_dim)
        m2 = torch.randn(1, toy_model.config.speaker_embed_dim)
        diff = (toy_model.fusion(h, m1) - toy_model.fusion(h, m2)).abs()
        assert diff.max() > 1e-6

    def test_row_permutation_equivariance(self, toy_model):
        torch.manual_seed(5)
        h = torch.randn(1, 6, toy_model.config.encoder_out_dim)
        m = torch.randn(1, toy_model.config.speaker_embed_dim)
        perm = torch.randperm(6)
        out = toy_model.fusion(h, m)
        out_perm = toy_model.fusion(h[:, perm], m)
        assert torch.allclose(out[:, perm], out_perm)


class TestStateExpand:
    def test_basic(self):
        states = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = M.state_expand(states, [1, 2])
        assert torch.equal(out, torch.tensor([[1.0, 2.0], [3.0, 4.0], [3.0, 4.0]]))

    def test_identity_when_all_one(self):
        states = torch.randn(5, 3)
        assert torch.equal(M.state_expand(states, [1] * 5), states)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            d = int(rng.integers(1, 5))
            durs = rng.integers(1, 6, size=n).tolist()
            states = torch.randn(n, d)
            expected = torch.cat(
                [states[i:i + 1].repeat(durs[i], 1) for i in range(n)])
            assert torch.equal(M.state_expand(states, durs), expected)

    def test_errors(self):
        with pytest.raises(ValueError):
            M.state_expand(torch.randn(2, 3), [1])
        with pytest.raises(ValueError):
            M.state_expand(torch.randn(2, 3), [1, 0])


class TestAssembleDecoderInput:
    def test_shape_and_order(self):
        t = 4
        expanded = torch.randn(t, 256)
        f0 = torch.randn(t, 2)
        rmse = torch.randn(t)
        pos = torch.randn(t)
        out = M.assemble_decoder_input(expanded, f0, rmse, pos)
        assert out.shape == (4, 260)
        assert torch.equal(out[:, :256], expanded)
        assert torch.equal(out[:, 256:258], f0)
        assert torch.equal(out[:, 258], rmse)
        assert torch.equal(out[:, 259], pos)

    def test_zero_conditioning(self):
        expanded = torch.randn(3, 256)
        out = M.assemble_decoder_input(expanded, torch.zeros(3, 2),
                                       torch.zeros(3), torch.zeros(3))
        assert torch.equal(out[:, :256], expanded)
        assert torch.all(out[:, 256:] == 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            M.assemble_decoder_input(torch.randn(3, 256), torch.randn(4, 2),
                                     torch.zeros(3), torch.zeros(3))


@pytest.fixture(autouse=True)
def _no_grad():
    with torch.no_grad():
        yield


class TestLocalAttention:
    def make(self, window):
        torch.manual_seed(2)
        return M.LocalAttention(8, 12, 16, window)

    def test_window_zero_returns_row(self):
        att = self.make(0)
        memory = torch.randn(1, 9, 12)
        for t in (0, 4, 8):
            context, weights = att(torch.randn(1, 8), memory, t, [9])
            assert torch.allclose(context[0], memory[0, t])
            assert weights[0, t] == pytest.approx(1.0)

    def test_weights_sum_to_one_and_zero_outside(self):
        att = self.make(3)
        memory = torch.randn(2, 20, 12)
        for t in (0, 7, 19):
            _, weights = att(torch.randn(2, 8), memory, t, [20, 20])
            assert torch.allclose(weights.sum(dim=1), torch.ones(2), atol=1e-6)
            assert torch.all(weights >= 0)
            outside = torch.ones(20, dtype=torch.bool)
            outside[max(0, t - 3):t + 4] = False
            assert torch.all(weights[:, outside] == 0)

    def test_clamped_window_at_start(self):
        att = self.make(10)
        memory = torch.randn(1, 30, 12)
        _, weights = att(torch.randn(1, 8), memory, 0, [30])
        assert torch.all(weights[0, 11:] == 0)
        assert weights[0, :11].sum() == pytest.approx(1.0)

    def test_respects_true_length(self):
        att = self.make(5)
        memory = torch.randn(1, 30, 12)
        _, weights = att(torch.randn(1, 8), memory, 10, [8])
        assert torch.all(weights[0, 8:] == 0)
        assert weights.sum() == pytest.approx(1.0)


class TestDecoder:
    def test_step_count_even(self, tiny_model):
        cfg = tiny_model.config
        cond = torch.randn(1, 10, cfg.decoder_input_dim)
        out = tiny_model.decoder(cond, [10])
        assert out.shape == (1, 10, cfg.mel_bins)

    def test_odd_length_trimmed(self, tiny_model):
        cfg = tiny_model.config
        cond = torch.randn(1, 9, cfg.decoder_input_dim)
        out = tiny_model.decoder(cond, [9])
        assert out.shape == (1, 9, cfg.mel_bins)

    def test_modes_agree_at_step_zero(self, tiny_model):
        cfg = tiny_model.config
        torch.manual_seed(8)
        cond = torch.randn(1, 8, cfg.decoder_input_dim)
        targets = torch.randn(1, 8, cfg.mel_bins)
        teacher = tiny_model.decoder(cond, [8], targets)
        free = tiny_model.decoder(cond, [8])
        r = cfg.reduction_factor
        assert torch.allclose(teacher[:, :r], free[:, :r])


class TestPostnet:
    def test_shape_preserved(self, tiny_model):
        x = torch.randn(1, 12, tiny_model.config.mel_bins)
        assert tiny_model.postnet(x, [12]).shape == x.shape

    def test_zero_projection_is_identity(self):
        torch.manual_seed(9)
        model = M.AcousticModel(M.ModelConfig.tiny(), N_PHONEMES, 2)
        model.eval()
        with torch.no_grad():
            model.postnet.out_proj.weight.zero_()
            model.postnet.out_proj.bias.zero_()
        x = torch.randn(1, 10, model.config.mel_bins)
        assert torch.equal(model.postnet(x, [10]), x)

    def test_deterministic_in_eval(self, tiny_model):
        x = torch.randn(1, 10, tiny_model.config.mel_bins)
        assert torch.equal(tiny_model.postnet(x, [10]),
                           tiny_model.postnet(x, [10]))


class TestComputeLoss:
    def test_perfect_prediction_zero(self):
        y = torch.randn(1, 6, 4)
        loss = M.compute_loss(y, y.clone(), y.clone())
        assert loss.total.item() == 0.0

    def test_constant_offset(self):
        y = torch.randn(1, 6, 4)
        loss = M.compute_loss(y, y.clone(), y + 0.5)
        assert loss.total.item() == pytest.approx(0.5)
        assert loss.l1_post.item() == pytest.approx(0.5)
        assert loss.l1_pre.item() == 0.0

    def test_brute_force_oracle(self, tiny_model):
        rng = np.random.default_rng(11)
        coeff = 1e-4
        for _ in range(100):
            t = int(rng.integers(1, 7))
            y = torch.tensor(rng.normal(size=(1, t, 4)))
            pre = torch.tensor(rng.normal(size=(1, t, 4)))
            post = torch.tensor(rng.normal(size=(1, t, 4)))
            loss = M.compute_loss(y, pre, post, tiny_model, coeff)
            expected = (np.abs((y - post).numpy()).mean()
                        + np.abs((y - pre).numpy()).mean()
                        + coeff * sum(float((p.detach() ** 2).sum())
                                      for p in tiny_model.l2_parameters()))
            assert loss.total.item() == pytest.approx(expected, rel=1e-6)

    def test_breakdown_sums_to_total(self, tiny_model):
        y = torch.randn(1, 5, 4)
        loss = M.compute_loss(y, torch.randn(1, 5, 4), torch.randn(1, 5, 4),
                              tiny_model, 1e-4)
        assert loss.total.item() == pytest.approx(
            loss.l1_post.item() + loss.l1_pre.item() + loss.l2.item(), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.compute_loss(torch.randn(1, 5, 4), torch.randn(1, 4, 4),
                           torch.randn(1, 5, 4))

    def test_l2_excludes_embeddings_and_biases(self, tiny_model):
        names = [n for n, p in tiny_model.named_parameters()
                 if "embedding" in n or p.dim() < 2]
        l2_set = {id(p) for p in tiny_model.l2_parameters()}
        for n, p in tiny_model.named_parameters():
            if n in names or "embedding" in n or p.dim() < 2:
                assert id(p) not in l2_set


class TestForward:
    def test_batch_of_one_matches_unbatched_composition(self, tiny_model):
        cfg = tiny_model.config
        durs = [2, 3, 1]
        inputs = random_inputs(cfg, durs, seed=13)
        with torch.no_grad():
            pre, post = tiny_model(**inputs)
            # manual composition
            enc = tiny_model.encoder(inputs["phoneme_ids"], [3])
            spk = tiny_model.speaker_embedding(inputs["speaker_ids"])
            fused = tiny_model.fusion(enc, spk)
            expanded = M.state_expand(fused[0], durs)
            cond = M.assemble_decoder_input(
                expanded, inputs["f0_cond"][0], inputs["rmse"][0],
                inputs["positions"][0]).unsqueeze(0)
            pre2 = tiny_model.decoder(cond, [6], inputs["targets"])
            post2 = tiny_model.postnet(pre2, [6])
        assert torch.equal(pre, pre2)
        assert torch.equal(post, post2)

    def test_padding_does_not_change_loss(self, tiny_model):
        cfg = tiny_model.config
        durs = [2, 3, 1]
        t = sum(durs)
        inputs = random_inputs(cfg, durs, seed=14)

        def run(pad):
            padded = {k: v for k, v in inputs.items()}
            if pad:
                z2 = torch.zeros(1, pad, 2)
                z1 = torch.zeros(1, pad)
                padded["f0_cond"] = torch.cat([inputs["f0_cond"], z2], dim=1)
                padded["rmse"] = torch.cat([inputs["rmse"], z1], dim=1)
                padded["positions"] = torch.cat([inputs["positions"], z1], dim=1)
                padded["targets"] = torch.cat(
                    [inputs["targets"],
                     torch.zeros(1, pad, cfg.mel_bins)], dim=1)
            with torch.no_grad():
                pre, post = tiny_model(**padded)
            mask = torch.zeros(1, t + pad)
            mask[0, :t] = 1
            return M.compute_loss(padded["targets"], pre, post,
                                  mask=mask).total.item()

        # doubling (and re-doubling) the padding must leave the loss unchanged
        assert run(4) == pytest.approx(run(8), abs=1e-6)
        assert run(8) == pytest.approx(run(16), abs=1e-6)

    def test_gradients_finite_and_nonzero(self):
        torch.manual_seed(15)
        model = M.AcousticModel(M.ModelConfig.tiny(), N_PHONEMES, N_SPEAKERS)
        model.train()
        inputs = random_inputs(model.config, [2, 2, 2], seed=16)
        with torch.enable_grad():
            pre, post = model(**inputs)
            loss = M.compute_loss(inputs["targets"], pre, post, model, 1e-4)
            loss.total.backward()
        group_norms = {}
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name
            group_norms[name] = p.grad.abs().sum().item()
        assert all(v > 0 for v in group_norms.values())

    def test_f0_conditioning_changes_output(self, tiny_model):
        inputs = random_inputs(tiny_model.config, [3, 3], seed=17)
        with torch.no_grad():
            _, post = tiny_model(**inputs)
            zeroed = dict(inputs)
            zeroed["f0_cond"] = torch.zeros_like(inputs["f0_cond"])
            _, post0 = tiny_model(**zeroed)
        assert (post - post0).abs().mean() > 0

    def test_speaker_swap_changes_output(self, tiny_model):
        inputs = random_inputs(tiny_model.config, [3, 3], seed=18)
        with torch.no_grad():
            inputs["speaker_ids"] = torch.tensor([0])
            _, a = tiny_model(**inputs)
            inputs["speaker_ids"] = torch.tensor([1])
            _, b = tiny_model(**inputs)
            inputs["speaker_ids"] = torch.tensor([0])
            _, a2 = tiny_model(**inputs)
        assert torch.equal(a, a2)
        assert (a - b).abs().mean() > 10 * 1e-6


class TestModelConfig:
    def test_round_trip(self):
        cfg = M.ModelConfig.toy()
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_reduction(self):
        with pytest.raises(ValueError):
            M.ModelConfig(reduction_factor=0)
