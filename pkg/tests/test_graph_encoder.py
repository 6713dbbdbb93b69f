import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from robustpe.attacks import MutationRecipe, apply_recipe, harvest_donors
from robustpe.errors import DegenerateData, DimensionMismatch, Diverged, EmptySections, VocabularyMismatch
from robustpe.features import VocabCaps, build_vocab, section_features
from robustpe.graph_encoder import (
    ComponentGraph,
    GatConfig,
    GatParams,
    Probe,
    RawGraph,
    build_graph,
    encode,
    encode_many,
    encode_sections,
    gat_forward,
    gat_gradients,
    gat_loss,
    init_params,
    node_embeddings,
    raw_graph,
    readout,
    train_gat,
)
from robustpe.metrics import roc_auc
from robustpe.pe_format import parse_pe
from robustpe.preprocess import preprocess_all

from conftest import malicious

DIMS = (7, 5, 4)


def random_graph(rng, n_sections, dims=DIMS, density=0.6):
    inputs = []
    for d in dims:
        x = rng.random((n_sections, d)) * (rng.random((n_sections, d)) < density)
        inputs.append(sp.csr_matrix(x))
    return RawGraph(inputs)


def small_params(seed=0, d_in=6, d_out=4, dims=DIMS):
    return init_params(dims, GatConfig(d_in=d_in, d_out=d_out, seed=seed))


@pytest.fixture(scope="module")
def trained_setup(small_corpus):
    pes = [parse_pe(d)[0] for _, d in small_corpus]
    labels = [r.label for r, _ in small_corpus]
    vocab = build_vocab(pes, labels, VocabCaps(ngrams=256, strings=64))
    graphs = [raw_graph(section_features(p, vocab)) for p in pes]
    y = [int(l != "benign") for l in labels]
    result = train_gat(graphs, y, GatConfig(d_in=16, d_out=8, epochs=150, seed=1), vocab.built_from)
    return vocab, graphs, y, result


# ---------------------------------------------------------------- structure


@pytest.mark.parametrize("n", [1, 2, 10])
def test_graph_is_disjoint_cliques(rng, n):
    g = build_graph(random_graph(rng, n), small_params())
    assert g.n_nodes == 3 * n
    assert len(g.edges) == 3 * n
    assert (g.node_section[g.edges[:, 0]] == g.node_section[g.edges[:, 1]]).all()
    src, dst = g.neighbourhoods()
    assert len(src) == 3 * n + 2 * len(g.edges)
    for s in range(n):
        nodes = np.flatnonzero(g.node_section == s)
        pairs = {tuple(e) for e in g.edges if e[0] in nodes}
        assert pairs == {(nodes[0], nodes[1]), (nodes[0], nodes[2]), (nodes[1], nodes[2])}


def test_empty_and_mismatched_inputs(rng):
    with pytest.raises(EmptySections):
        raw_graph([])
    with pytest.raises(DimensionMismatch):
        build_graph(random_graph(rng, 2, dims=(3, 5, 4)), small_params())
    g = build_graph(random_graph(rng, 2), small_params())
    with pytest.raises(DimensionMismatch):
        gat_forward(g, small_params(d_in=5))


# ---------------------------------------------------------------- forward pass


def test_equal_features_give_uniform_attention():
    p = small_params()
    h = np.tile(np.linspace(0.1, 1.0, p.d_in), (3, 1))
    g = ComponentGraph(np.zeros(3, int), np.arange(3), h, np.array([[0, 1], [0, 2], [1, 2]]))
    out, att = gat_forward(g, p, return_attention=True)
    assert np.allclose(att.toarray(), 1 / 3, atol=1e-15)
    assert np.allclose(out, np.maximum(h @ p.weight, 0), rtol=1e-12)


@given(st.integers(1, 12), st.integers(0, 1000))
def test_attention_rows_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    p = small_params(seed)
    p.attention[:] = rng.normal(size=p.attention.shape)  # allow negative scores too
    _, att = gat_forward(build_graph(random_graph(rng, n), p), p, return_attention=True)
    assert np.abs(np.asarray(att.sum(axis=1)).ravel() - 1).max() <= 1e-9


@given(st.integers(1, 10), st.integers(0, 1000))
def test_edge_and_clique_forward_agree(n, seed):
    rng = np.random.default_rng(seed)
    p = small_params(seed)
    raw = random_graph(rng, n)
    edge_route = gat_forward(build_graph(raw, p), p)
    clique_route = node_embeddings(raw, p).reshape(3 * n, -1)
    np.testing.assert_allclose(edge_route, clique_route, rtol=1e-12, atol=1e-14)


def test_sections_are_isolated(rng):
    p = small_params()
    raw = random_graph(rng, 4)
    other = RawGraph([x.tolil() for x in raw.inputs])
    for x in other.inputs:
        x[2, :] = rng.random(x.shape[1]) * 5
    other = RawGraph([x.tocsr() for x in other.inputs])
    a, b = node_embeddings(raw, p), node_embeddings(other, p)
    assert np.array_equal(np.delete(a, 2, axis=0), np.delete(b, 2, axis=0))
    assert not np.array_equal(a[2], b[2])
    ea = gat_forward(build_graph(raw, p), p)
    eb = gat_forward(build_graph(other, p), p)
    keep = np.repeat(np.arange(4), 3) != 2
    assert np.array_equal(ea[keep], eb[keep])


# ---------------------------------------------------------------- readout


def test_readout_single_section(rng):
    p = small_params()
    raw = random_graph(rng, 1)
    emb = node_embeddings(raw, p)
    enc = readout(emb)
    for k in range(3):
        assert np.array_equal(enc.pooled[k], emb[0, k])
    g = build_graph(raw, p)
    assert readout(gat_forward(g, p), g).vector.shape == enc.vector.shape


def test_duplicated_section_doubles(rng):
    p = small_params()
    raw = random_graph(rng, 1)
    twice = RawGraph([sp.vstack([x, x], format="csr") for x in raw.inputs])
    assert np.array_equal(readout(node_embeddings(twice, p)).vector, 2 * readout(node_embeddings(raw, p)).vector)


def test_zero_section_contributes_its_closed_form(rng):
    p = small_params()
    raw = random_graph(rng, 3)
    zero = RawGraph([sp.csr_matrix((1, d)) for d in DIMS])
    # zero inputs project to zero, so every message and embedding of that triangle is zero
    assert not node_embeddings(zero, p).any()
    grown = RawGraph([sp.vstack([x, z], format="csr") for x, z in zip(raw.inputs, zero.inputs)])
    assert readout(node_embeddings(grown, p)) == readout(node_embeddings(raw, p))


@given(st.integers(2, 9), st.integers(0, 1000))
def test_pooling_is_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    p = small_params(seed)
    raw = random_graph(rng, n)
    perm = rng.permutation(n)
    shuffled = RawGraph([x[perm] for x in raw.inputs])
    assert readout(node_embeddings(shuffled, p)) == readout(node_embeddings(raw, p))


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 1000))
def test_added_sections_never_lower_the_encoding(n, extra, seed):
    rng = np.random.default_rng(seed)
    p = small_params(seed)
    raw = random_graph(rng, n)
    more = random_graph(rng, extra)
    grown = RawGraph([sp.vstack([x, y], format="csr") for x, y in zip(raw.inputs, more.inputs)])
    a, b = readout(node_embeddings(raw, p)).vector, readout(node_embeddings(grown, p)).vector
    assert (b >= a - 1e-12).all()
    assert (a >= 0).all()


def test_encode_many_matches_single(rng):
    p = small_params()
    graphs = [random_graph(rng, n) for n in (1, 4, 2, 7)]
    many = encode_many(graphs, p)
    for row, g in zip(many, graphs):
        assert np.array_equal(row, readout(node_embeddings(g, p)).vector)
    assert encode_many([], p).shape == (0, 3 * p.d_out)


# ---------------------------------------------------------------- gradients and training


def numeric_gradient(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        up = f()
        arr[i] = old - eps
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("n_classes", [2, 3])
def test_gradients_match_finite_differences(n_classes):
    rng = np.random.default_rng(7)
    graphs = [random_graph(rng, int(rng.integers(1, 4))) for _ in range(6)]
    labels = [i % n_classes for i in range(6)]
    p = small_params(3)
    for a in p.arrays():
        a[:] = rng.uniform(0.05, 1.0, a.shape)
    k = 1 if n_classes == 2 else n_classes
    probe = Probe(rng.normal(size=(3 * p.d_out, k)), rng.normal(size=k))
    grads = gat_gradients(graphs, labels, p, probe)
    loss = lambda: gat_loss(graphs, labels, p, probe)
    pairs = [(grads["weight"], p.weight), (grads["attention"], p.attention)]
    pairs += list(zip(grads["projections"], p.projections))
    pairs += [(grads["probe_w"], probe.weight), (grads["probe_b"], probe.bias)]
    for analytic, arr in pairs:
        num = numeric_gradient(loss, arr)
        err = np.linalg.norm(analytic - num) / max(np.linalg.norm(analytic) + np.linalg.norm(num), 1e-12)
        assert err <= 1e-4


def test_training_separates_and_stays_non_negative(trained_setup):
    _, graphs, y, result = trained_setup
    losses = np.array(result.losses)
    assert losses[-1] < losses[0]
    # decreasing on average: each quarter ends lower than it started
    quarters = np.array_split(losses, 4)
    assert all(q[-1] < q[0] for q in quarters)
    assert result.params.min_entry() >= 0
    scores = result.probe_scores(graphs)[:, 0]
    assert roc_auc(scores, np.array(y)) == 1.0


def test_zero_learning_rate_only_clamps(rng):
    graphs = [random_graph(rng, 2) for _ in range(4)]
    init = small_params(2)
    init.weight[0, 0] = -0.5
    result = train_gat(graphs, [0, 1, 0, 1], GatConfig(d_in=6, d_out=4, learning_rate=0.0, epochs=5), init=init)
    expected = init.copy()
    expected.clamp()
    assert result.params == expected


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors(rng):
    graphs = [random_graph(rng, 2) for _ in range(4)]
    with pytest.raises(DegenerateData):
        train_gat(graphs, [1, 1, 1, 1], GatConfig(d_in=6, d_out=4, epochs=2))
    init = small_params()
    init.input_scale = (1e308, 1e308, 1e308)  # projected inputs overflow to inf
    with pytest.raises(Diverged):
        train_gat(graphs, [0, 1, 0, 1], GatConfig(d_in=6, d_out=4, epochs=3), init=init)


def test_training_is_deterministic(rng):
    graphs = [random_graph(rng, int(rng.integers(1, 4))) for _ in range(8)]
    cfg = GatConfig(d_in=6, d_out=4, epochs=20, seed=5)
    a = train_gat(graphs, [0, 1] * 4, cfg)
    b = train_gat(graphs, [0, 1] * 4, cfg)
    assert a.params == b.params and a.losses == b.losses


# ---------------------------------------------------------------- files and persistence


def test_encode_on_files(trained_setup, donor_files):
    vocab, _, _, result = trained_setup
    params = result.params
    pe, _ = parse_pe(malicious(44))
    e1, e2 = encode(pe, vocab, params), encode(pe, vocab, params)
    assert e1 == e2
    assert (e1.vector >= 0).all()
    pool = harvest_donors(donor_files)
    padded = apply_recipe(pe, MutationRecipe("pad", 1, pad_bytes=4096, pad_source="benign"), pool)
    assert encode(preprocess_all(padded), vocab, params) == encode(preprocess_all(pe), vocab, params)
    assert encode_sections(section_features(pe, vocab), params) == e1


def test_params_json_round_trip_and_vocab_check(trained_setup):
    vocab, _, _, result = trained_setup
    back = GatParams.from_json(result.params.to_json())
    assert back == result.params
    assert back.vocab_fingerprint == vocab.built_from
    back.vocab_fingerprint = "something else"
    with pytest.raises(VocabularyMismatch):
        encode(parse_pe(malicious(1))[0], vocab, back)
