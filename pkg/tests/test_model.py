"""Cross-mode equivalence of the toy decoder and model plumbing."""

import numpy as np
import pytest

from relayserve.errors import ConfigurationError, ContractError
from relayserve.model import (DecoderModel, ModelConfig, init_weights,
                              load_model_config, load_weights,
                              save_model_config, save_weights)

SMALL = ModelConfig(layers=2, heads=2, head_dim=8, ffn_dim=32, vocab_size=64,
                    seed=17)


def run_both_modes(cfg, system, prompts, steps):
    """Stepwise generation in both modes; returns tokens and logit gap."""
    model = DecoderModel(cfg)
    tokens, logit_streams = {}, {}
    for mode in ("baseline", "relay"):
        batch = model.begin_batch(prompts, mode, system)
        _, logits = model.forward_prompt_phase(batch)
        stream = [logits]
        for _ in range(steps - 1):
            if not batch.active:
                break
            _, lg = model.forward_decode_step(batch)
            stream.append(lg)
        tokens[mode] = [st.emitted for st in batch.states]
        logit_streams[mode] = stream
    gap = max((np.abs(a - b).max() for a, b
               in zip(logit_streams["baseline"], logit_streams["relay"])
               if a.shape == b.shape), default=0.0)
    return tokens, gap


class TestConfig:
    def test_model_dim_derived(self):
        assert SMALL.model_dim == 16

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(head_dim=7)

    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "model.cfg"
        save_model_config(SMALL, path)
        assert load_model_config(path) == SMALL

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "model.cfg"
        path.write_text("layers = 2\nwidth = 8\n")
        with pytest.raises(ConfigurationError):
            load_model_config(path)


class TestWeights:
    def test_seeded_init_is_bitwise_reproducible(self):
        a = init_weights(SMALL)
        b = init_weights(SMALL)
        assert (a.embedding == b.embedding).all()
        assert (a.layers[1].wq == b.layers[1].wq).all()
        assert (a.head == b.head).all()

    def test_different_seeds_differ(self):
        a = init_weights(SMALL)
        b = init_weights(ModelConfig(layers=2, heads=2, head_dim=8,
                                     ffn_dim=32, vocab_size=64, seed=18))
        assert not (a.embedding == b.embedding).all()

    def test_entries_finite_and_scaled(self):
        w = init_weights(SMALL)
        assert np.isfinite(w.embedding).all()
        assert np.std(w.layers[0].wq) < 0.05

    def test_persistence_round_trip(self, tmp_path):
        w = init_weights(SMALL)
        path = tmp_path / "model.wts"
        save_weights(SMALL, w, path)
        cfg2, w2 = load_weights(path)
        assert cfg2 == SMALL
        assert (w.embedding == w2.embedding).all()
        assert (w.layers[1].w_down == w2.layers[1].w_down).all()
        assert (w.head == w2.head).all()


class TestCrossModeEquivalence:
    def test_tokens_identical_and_logits_close(self):
        rng = np.random.default_rng(0)
        system = rng.integers(1, 64, size=10).tolist()
        prompts = [rng.integers(1, 64, size=u).tolist() for u in (2, 4, 3)]
        tokens, gap = run_both_modes(SMALL, system, prompts, steps=6)
        assert tokens["baseline"] == tokens["relay"]
        assert gap < 1e-8

    def test_many_random_cases(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            cfg = ModelConfig(
                layers=int(rng.integers(1, 4)),
                heads=int(rng.choice([1, 2, 4])),
                head_dim=int(rng.choice([4, 8])),
                ffn_dim=int(rng.choice([16, 32])),
                vocab_size=int(rng.choice([32, 64])),
                seed=int(rng.integers(0, 1000)))
            system = rng.integers(1, cfg.vocab_size,
                                  size=int(rng.integers(1, 13))).tolist()
            prompts = [rng.integers(1, cfg.vocab_size,
                                    size=int(rng.integers(1, 6))).tolist()
                       for _ in range(int(rng.integers(1, 4)))]
            tokens, gap = run_both_modes(cfg, system, prompts,
                                         steps=int(rng.integers(1, 6)))
            assert tokens["baseline"] == tokens["relay"]
            assert gap < 1e-8

    def test_float32_mode_stays_token_equivalent(self):
        cfg = ModelConfig(layers=2, heads=2, head_dim=8, ffn_dim=32,
                          vocab_size=64, precision="float32", seed=5)
        rng = np.random.default_rng(2)
        system = rng.integers(1, 64, size=8).tolist()
        prompts = [rng.integers(1, 64, size=3).tolist()]
        tokens, gap = run_both_modes(cfg, system, prompts, steps=4)
        assert tokens["baseline"] == tokens["relay"]
        # storage rounding noise, judged relative to the logit scale
        assert gap < 1e-3


class TestLifecycle:
    def test_cache_length_bookkeeping(self):
        rng = np.random.default_rng(3)
        system = rng.integers(1, 64, size=9).tolist()
        prompts = [rng.integers(1, 64, size=u).tolist() for u in (3, 5)]
        model = DecoderModel(SMALL)
        T = 4
        for mode in ("baseline", "relay"):
            batch = model.begin_batch(prompts, mode, system)
            model.forward_prompt_phase(batch)
            for _ in range(T):
                model.forward_decode_step(batch)
            for st, u in zip(batch.states, (3, 5)):
                expect = u + T if mode == "relay" else len(system) + u + T
                assert batch.ctx_cache.length(st.request_id) == expect

    def test_phase_transitions_once(self):
        model = DecoderModel(SMALL)
        batch = model.begin_batch([[1, 2]], "relay", [7, 8, 9])
        assert batch.states[0].phase == "prompt"
        model.forward_prompt_phase(batch)
        assert batch.states[0].phase == "autoregressive"
        with pytest.raises(ContractError):
            model.forward_prompt_phase(batch)

    def test_empty_user_prompt_rejected(self):
        model = DecoderModel(SMALL)
        with pytest.raises(ContractError):
            model.begin_batch([[]], "baseline", [1, 2])

    def test_relay_without_system_rejected(self):
        model = DecoderModel(SMALL)
        with pytest.raises(ConfigurationError):
            model.begin_batch([[1]], "relay", [])

    def test_generate_respects_cap_and_end_token(self):
        model = DecoderModel(SMALL)
        rng = np.random.default_rng(4)
        system = rng.integers(1, 64, size=6).tolist()
        prompts = [rng.integers(1, 64, size=3).tolist() for _ in range(2)]
        outs = model.generate(prompts, "relay", 5, system)
        for seq in outs:
            assert 1 <= len(seq) <= 5
            if len(seq) < 5:
                assert seq[-1] == 0

    def test_generate_deterministic(self):
        model = DecoderModel(SMALL)
        prompts = [[3, 9], [11, 5, 2]]
        system = [4, 4, 8]
        assert (model.generate(prompts, "baseline", 6, system)
                == model.generate(prompts, "baseline", 6, system))
