import numpy as np
import pytest

from lossytp.model import (Activation, BlockKind, DimensionError, KVCache,
                           MergeError, ModelSpec, compute_group, dense_forward,
                           drop_experiment, init_model, kv_project,
                           merge_partials, oracle_importance)


def small_spec(seed=7, layers=3):
    return ModelSpec(num_layers=layers, hidden_dim=64, num_heads=8,
                     num_kv_heads=4, mlp_groups=16, vocab_groups=16,
                     group_size=8, seed=seed)


def teacher_cache(store, trace, layer, upto):
    cache = KVCache(store.spec, capacity=upto + 1)
    for t in range(upto):
        k_t, v_t = kv_project(store, layer, trace.hiddens[layer][t])
        cache.append(layer, k_t, v_t)
    return cache


class TestModelSpec:
    def test_divisibility_enforced(self):
        with pytest.raises(DimensionError):
            ModelSpec(2, 65, 4, 2, 4, 4, 8, 0)

    def test_kv_divides_heads(self):
        with pytest.raises(DimensionError):
            ModelSpec(2, 64, 4, 3, 4, 4, 8, 0)

    def test_positive_dims(self):
        with pytest.raises(DimensionError):
            ModelSpec(0, 64, 4, 2, 4, 4, 8, 0)

    def test_per_head_dim(self):
        spec = ModelSpec(2, 64, 4, 2, 4, 4, 8, 0)
        assert spec.head_dim == 16
        assert spec.group_count(BlockKind.MHA) == 4


class TestInitModel:
    def test_deterministic_per_seed(self):
        a, b = init_model(small_spec(seed=1)), init_model(small_spec(seed=1))
        assert np.array_equal(a.embedding, b.embedding)
        assert np.array_equal(a.lm_head, b.lm_head)
        for la, lb in zip(a.layers, b.layers):
            for name in ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"):
                assert np.array_equal(getattr(la, name), getattr(lb, name))

    def test_seed_changes_weights(self):
        a, b = init_model(small_spec(seed=1)), init_model(small_spec(seed=2))
        assert not np.array_equal(a.embedding, b.embedding)


class TestDenseForward:
    def test_logit_shape(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=5)
        trace = dense_forward(store, tokens)
        assert trace.logits.shape == (5, store.spec.vocab_size)

    def test_deterministic(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=5)
        a, b = dense_forward(store, tokens), dense_forward(store, tokens)
        assert np.array_equal(a.logits, b.logits)

    def test_token_out_of_range(self):
        store = init_model(small_spec())
        with pytest.raises(ValueError):
            dense_forward(store, [store.spec.vocab_size])

    def test_finite_everywhere(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=12)
        trace = dense_forward(store, tokens)
        assert np.all(np.isfinite(trace.hiddens))
        assert np.all(np.isfinite(trace.logits))


class TestComputeGroupAndMerge:
    def test_group_sum_matches_dense_blocks(self, rng):
        """Merging every group's partial reproduces the dense block output.

        The MLP block's true input is the post-attention residual stream.
        """
        store = init_model(small_spec())
        spec = store.spec
        tokens = rng.integers(0, spec.vocab_size, size=4)
        trace = dense_forward(store, tokens)
        t = 3
        for layer in range(spec.num_layers):
            cache = teacher_cache(store, trace, layer, t)
            x_mha = trace.hiddens[layer][t]
            x_mlp = x_mha + trace.mha_out[layer, t]
            for kind, x, ref in ((BlockKind.MHA, x_mha, trace.mha_out[layer, t]),
                                 (BlockKind.MLP, x_mlp, trace.mlp_out[layer, t])):
                inp = Activation(values=x, token_idx=t, layer=layer)
                parts = [compute_group(store, layer, kind, g, inp, cache)
                         for g in range(spec.group_count(kind))]
                merged = merge_partials(spec, parts, kind, layer)
                rel = np.max(np.abs(merged - ref)) / (np.max(np.abs(ref)) + 1e-300)
                assert rel < 1e-5

    def test_lm_head_chunks_match_dense_logits(self, rng):
        store = init_model(small_spec())
        spec = store.spec
        tokens = rng.integers(0, spec.vocab_size, size=3)
        trace = dense_forward(store, tokens)
        final = trace.hiddens[spec.num_layers][2]
        inp = Activation(values=final, token_idx=2, layer=spec.num_layers)
        parts = [compute_group(store, spec.num_layers - 1, BlockKind.LM_HEAD, g, inp)
                 for g in range(spec.vocab_groups)]
        logits = merge_partials(spec, parts, BlockKind.LM_HEAD, spec.num_layers - 1)
        rel = np.max(np.abs(logits - trace.logits[2])) / np.max(np.abs(trace.logits[2]))
        assert rel < 1e-5

    def test_zero_input_mlp_group_is_zero(self):
        store = init_model(small_spec())
        inp = Activation(values=np.zeros(store.spec.hidden_dim), token_idx=0, layer=0)
        ga = compute_group(store, 0, BlockKind.MLP, 0, inp)
        assert np.allclose(ga.partial, 0.0)

    def test_group_compute_deterministic(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=1)
        a = compute_group(store, 1, BlockKind.MLP, 3, inp)
        b = compute_group(store, 1, BlockKind.MLP, 3, inp)
        assert np.array_equal(a.partial, b.partial)

    def test_merge_empty_is_zero_vector(self):
        spec = small_spec()
        out = merge_partials(spec, [], BlockKind.MLP, 0)
        assert out.shape == (spec.hidden_dim,)
        assert np.all(out == 0.0)

    def test_merge_subset_additivity(self, rng):
        """Any subset's merge equals dense output minus the left-out partials."""
        store = init_model(small_spec())
        spec = store.spec
        x = rng.normal(size=spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=2)
        parts = [compute_group(store, 2, BlockKind.MLP, g, inp)
                 for g in range(spec.mlp_groups)]
        full = merge_partials(spec, parts, BlockKind.MLP, 2)
        for trial in range(10):
            keep = rng.random(spec.mlp_groups) < 0.6
            subset = [p for p, k in zip(parts, keep) if k]
            left_out = sum((p.partial for p, k in zip(parts, keep) if not k),
                           np.zeros(spec.hidden_dim))
            merged = merge_partials(spec, subset, BlockKind.MLP, 2)
            assert np.allclose(merged, full - left_out, atol=1e-10)

    def test_merge_rejects_duplicates(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=0)
        ga = compute_group(store, 0, BlockKind.MLP, 1, inp)
        with pytest.raises(MergeError):
            merge_partials(store.spec, [ga, ga], BlockKind.MLP, 0)

    def test_merge_rejects_mixed_tags(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        a = compute_group(store, 0, BlockKind.MLP, 1,
                          Activation(values=x, token_idx=0, layer=0))
        b = compute_group(store, 1, BlockKind.MLP, 2,
                          Activation(values=x, token_idx=0, layer=1))
        with pytest.raises(MergeError):
            merge_partials(store.spec, [a, b], BlockKind.MLP, 0)

    def test_lm_head_missing_chunk_is_error(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=3)
        parts = [compute_group(store, 2, BlockKind.LM_HEAD, g, inp)
                 for g in range(store.spec.vocab_groups - 1)]
        with pytest.raises(MergeError):
            merge_partials(store.spec, parts, BlockKind.LM_HEAD, 2)


class TestOracleImportance:
    def test_returns_permutation(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=1)
        rl = oracle_importance(store, 1, BlockKind.MLP, inp)
        assert sorted(rl.order.tolist()) == list(range(store.spec.mlp_groups))

    def test_top1_has_max_norm(self, rng):
        store = init_model(small_spec())
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=1)
        rl = oracle_importance(store, 1, BlockKind.MLP, inp)
        norms = [np.linalg.norm(compute_group(store, 1, BlockKind.MLP, g, inp).partial)
                 for g in range(store.spec.mlp_groups)]
        assert norms[rl.order[0]] == max(norms)

    def test_zeroed_group_ranked_last(self, rng):
        store = init_model(small_spec())
        gs = store.spec.group_size
        store.layers[1].w_down[2 * gs:3 * gs, :] = 0.0
        x = rng.normal(size=store.spec.hidden_dim)
        inp = Activation(values=x, token_idx=0, layer=1)
        rl = oracle_importance(store, 1, BlockKind.MLP, inp)
        assert rl.order[-1] == 2

    def test_agrees_with_dense_trace_norms(self, rng):
        """Independent check: rank order recomputed from the dense trace."""
        store = init_model(small_spec())
        spec = store.spec
        tokens = rng.integers(0, spec.vocab_size, size=5)
        trace = dense_forward(store, tokens)
        t, layer = 4, 1
        cache = teacher_cache(store, trace, layer, t)
        x_mha = trace.hiddens[layer][t]
        x_mlp = x_mha + trace.mha_out[layer, t]
        for kind, x in ((BlockKind.MHA, x_mha), (BlockKind.MLP, x_mlp)):
            inp = Activation(values=x, token_idx=t, layer=layer)
            rl = oracle_importance(store, layer, kind, inp, cache)
            ref = np.argsort(-trace.group_norms[(layer, kind)][t], kind="stable")
            assert np.array_equal(rl.order, ref)


class TestDropExperiment:
    def test_no_loss_no_deviation(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=6)
        assert drop_experiment(store, tokens, "random", 0.0, 0.25, 0) == 0.0
        assert drop_experiment(store, tokens, "random", 0.1, 0.0, 0) == 0.0

    def test_deterministic_per_seed(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=6)
        a = drop_experiment(store, tokens, "high_norm", 0.1, 0.25, 5)
        b = drop_experiment(store, tokens, "high_norm", 0.1, 0.25, 5)
        assert a == b

    def test_strategy_ordering_small(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=8)
        means = {s: np.mean([drop_experiment(store, tokens, s, 0.1, 0.25, k)
                             for k in range(10)])
                 for s in ("low_norm", "random", "high_norm")}
        assert means["low_norm"] < means["random"] < means["high_norm"]

    def test_rejects_bad_arguments(self, rng):
        store = init_model(small_spec())
        tokens = rng.integers(0, store.spec.vocab_size, size=3)
        with pytest.raises(ValueError):
            drop_experiment(store, tokens, "sideways", 0.1, 0.25, 0)
        with pytest.raises(ValueError):
            drop_experiment(store, tokens, "random", 1.5, 0.25, 0)


class TestKVCache:
    def test_full_reservation_independent_of_assignment(self):
        spec = small_spec()
        cache = KVCache(spec, capacity=10)
        expected = 2 * spec.num_layers * 10 * spec.num_kv_heads * spec.head_dim * 8
        assert cache.reserved_bytes() == expected

    def test_single_writer_sequence(self, rng):
        spec = small_spec()
        store = init_model(spec)
        cache = KVCache(spec, capacity=2)
        x = rng.normal(size=spec.hidden_dim)
        k, v = kv_project(store, 0, x)
        cache.append(0, k, v)
        cache.append(0, k, v)
        with pytest.raises(IndexError):
            cache.append(0, k, v)
