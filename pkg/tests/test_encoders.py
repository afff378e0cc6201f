import numpy as np
import pytest

from partforge.encoders import (
    PAD_ID,
    UNK_ID,
    EncoderConfig,
    EncoderError,
    ModelParams,
    Vocab,
    backward_shape,
    backward_text,
    encode_shape,
    encode_text,
    load_params,
    normalize_text,
    save_params,
    tokenize,
)


def _params(dim=8, pp_hidden=8, embed_dim=6, vocab_size=12, n_classes=4, seed=0):
    cfg = EncoderConfig(dim=dim, pp_hidden=pp_hidden, embed_dim=embed_dim,
                        vocab_size=vocab_size, n_classes=n_classes)
    return ModelParams.init(cfg, np.random.default_rng(seed))


def test_normalize_text():
    assert normalize_text("A wide, WOODEN top!") == ["a", "wide", "wooden", "top"]
    assert normalize_text("  ") == []
    assert normalize_text("x2-y") == ["x2", "y"]


def test_vocab_build_and_special_ids():
    vocab = Vocab.build(["a chair", "a wide chair"])
    assert vocab.token_to_id["<pad>"] == PAD_ID
    assert vocab.token_to_id["<unk>"] == UNK_ID
    assert set(vocab.token_to_id) == {"<pad>", "<unk>", "a", "chair", "wide"}


def test_vocab_roundtrip(tmp_path):
    vocab = Vocab.build(["four tall legs", "a seat"])
    vocab.save(tmp_path / "vocab.txt")
    back = Vocab.load(tmp_path / "vocab.txt")
    assert back.token_to_id == vocab.token_to_id


def test_tokenize_unknown_and_empty():
    vocab = Vocab.build(["a chair"])
    ids = tokenize("a purple chair", vocab)
    assert ids[0] == vocab.token_to_id["a"]
    assert ids[1] == UNK_ID
    assert tokenize("", vocab) == [UNK_ID]
    assert tokenize("a chair", vocab) == tokenize("A  chair!", vocab)


def test_encoder_config_requires_even_dim():
    with pytest.raises(EncoderError):
        EncoderConfig(dim=7)


def test_encode_shape_contract(rng):
    params = _params()
    pts = rng.normal(size=(8, 3))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    out, cache = encode_shape(pts, labels, params)
    assert out["part_features"].shape == (2, 8)
    assert out["seg_logits"].shape == (8, 4)
    assert out["global"].shape == (8,)
    # global feature equals the column-wise max of the local features
    assert np.array_equal(out["global"], cache["z2"].max(axis=0))


def test_encode_shape_permutation_invariant(rng):
    params = _params()
    pts = rng.normal(size=(20, 3))
    labels = rng.integers(0, 3, size=20)
    perm = rng.permutation(20)
    a, _ = encode_shape(pts, labels, params)
    b, _ = encode_shape(pts[perm], labels[perm], params)
    assert np.allclose(a["part_features"], b["part_features"], atol=1e-9)
    assert np.allclose(a["global"], b["global"], atol=1e-9)


def test_encode_shape_single_point(rng):
    params = _params()
    out, _ = encode_shape(rng.normal(size=(1, 3)), np.array([2]), params)
    assert out["part_features"].shape == (1, 8)


def test_encode_shape_argmax_grouping(rng):
    params = _params()
    pts = rng.normal(size=(10, 3))
    out, cache = encode_shape(pts, None, params)
    groups = np.argmax(out["seg_logits"], axis=1)
    assert np.array_equal(cache["groups"], groups)
    assert out["part_features"].shape[0] == len(np.unique(groups))


def test_encode_shape_errors(rng):
    params = _params(n_classes=4)
    with pytest.raises(EncoderError):
        encode_shape(np.zeros((0, 3)), None, params)
    with pytest.raises(EncoderError):
        encode_shape(rng.normal(size=(4, 3)), np.array([0, 1, 2]), params)
    with pytest.raises(EncoderError):
        encode_shape(rng.normal(size=(4, 3)), np.array([0, 1, 2, 4]), params)


def test_backward_shape_zero_upstream_zero_grads(rng):
    params = _params()
    pts = rng.normal(size=(6, 3))
    labels = np.zeros(6, dtype=int)
    out, cache = encode_shape(pts, labels, params)
    grads = params.zero_grads()
    backward_shape(params, cache, np.zeros_like(out["part_features"]),
                   np.zeros_like(out["seg_logits"]), grads)
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_shape_matches_fd(rng):
    params = _params(dim=4, pp_hidden=4, n_classes=2)
    pts = rng.normal(size=(5, 3))
    labels = np.array([0, 0, 1, 1, 1])
    d_pf = rng.normal(size=(2, 4))
    d_seg = rng.normal(size=(5, 2))

    def loss():
        out, _ = encode_shape(pts, labels, params)
        return float((out["part_features"] * d_pf).sum()
                     + (out["seg_logits"] * d_seg).sum())

    _, cache = encode_shape(pts, labels, params)
    grads = params.zero_grads()
    backward_shape(params, cache, d_pf, d_seg, grads)
    step = 1e-6
    for name in ("pp_w1", "pp_w2", "fuse_w1", "fuse_w2", "seg_w", "seg_b"):
        arr = params.tensors[name]
        flat = np.random.default_rng(1).choice(arr.size, size=min(6, arr.size),
                                               replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss()
            arr[idx] = orig - step
            dn = loss()
            arr[idx] = orig
            fd = (up - dn) / (2 * step)
            assert abs(fd - grads[name][idx]) < 1e-5 * max(1.0, abs(fd))


def test_encode_text_contract():
    params = _params()
    w, _ = encode_text([2, 3, 4], params)
    assert w.shape == (3, 8)
    w1, _ = encode_text([5], params)
    assert w1.shape == (1, 8)


def test_encode_text_order_sensitive():
    params = _params()
    a, _ = encode_text([2, 3, 4], params)
    b, _ = encode_text([4, 3, 2], params)
    assert not np.allclose(a, b, atol=1e-6)


def test_encode_text_zero_weights_zero_output():
    params = _params()
    for name in list(params.tensors):
        if name.startswith("gru_"):
            params.tensors[name] = np.zeros_like(params.tensors[name])
    w, _ = encode_text([2, 3], params)
    assert np.all(w == 0.0)


def test_encode_text_errors():
    params = _params(vocab_size=12)
    with pytest.raises(EncoderError):
        encode_text([], params)
    with pytest.raises(EncoderError):
        encode_text([12], params)
    with pytest.raises(EncoderError):
        encode_text([-1], params)


def test_backward_text_matches_fd(rng):
    params = _params(dim=4, embed_dim=4, vocab_size=8)
    ids = [1, 3, 5, 3]
    d_w = rng.normal(size=(4, 4))

    def loss():
        w, _ = encode_text(ids, params)
        return float((w * d_w).sum())

    _, cache = encode_text(ids, params)
    grads = params.zero_grads()
    backward_text(params, cache, d_w, grads)
    step = 1e-6
    for name in ("gru_f_wz", "gru_f_uh", "gru_b_wr", "gru_b_uz", "embed",
                 "gru_f_bh", "gru_b_bz"):
        arr = params.tensors[name]
        flat = np.random.default_rng(2).choice(arr.size, size=min(6, arr.size),
                                               replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss()
            arr[idx] = orig - step
            dn = loss()
            arr[idx] = orig
            fd = (up - dn) / (2 * step)
            assert abs(fd - grads[name][idx]) < 1e-5 * max(1.0, abs(fd))


def test_repeated_token_grad_accumulates(rng):
    # the embedding row of a repeated token collects both timesteps' grads
    params = _params(dim=4, embed_dim=4, vocab_size=8)
    d_w = rng.normal(size=(2, 4))
    _, cache = encode_text([3, 3], params)
    grads = params.zero_grads()
    backward_text(params, cache, d_w, grads)
    assert np.any(grads["embed"][3] != 0)
    assert np.all(grads["embed"][4] == 0)


def test_checkpoint_roundtrip(tmp_path):
    params = _params()
    save_params(tmp_path / "m.pf", params, {"note": "test"})
    back, meta = load_params(tmp_path / "m.pf")
    assert meta["note"] == "test"
    assert back.config == params.config
    assert set(back.tensors) == set(params.tensors)
    for name, arr in params.tensors.items():
        expect = arr.astype("<f4").astype(np.float64)
        assert np.array_equal(back.tensors[name], expect)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bogus.pf"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(EncoderError):
        load_params(path)
