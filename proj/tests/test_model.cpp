// SPDX-License-Identifier: Apache-2.0

#include "esmerge/checkpoint.hpp"
#include "esmerge/model.hpp"
#include "esmerge/probe.hpp"
#include "esmerge/rng.hpp"

#include "test_util.hpp"

#include "doctest.h"

#include <cmath>
#include <limits>
#include <optional>

using namespace esmerge;
using namespace esmerge::test;

namespace {

ModelBundle fixture_bundle(std::uint64_t seed = 101, int n_modalities = 2) {
    return gen_toy_bundle(seed, tiny_config(), tiny_specs(n_modalities));
}

TokenSequence fixture_probe(const ModelBundle & bundle, std::uint64_t seed = 55) {
    const auto specs = specs_from_bundle(bundle, 4, 2);
    return build_probe_batch(specs, 2, seed).probes[0];
}

} // namespace

TEST_CASE("rmsnorm rows have unit root-mean-square before the scale") {
    // eps = 1e-6 shifts unit-scale rows by about 5e-7; at large row magnitude
    // its footprint drops below the 1e-10 check.
    Rng rng(9);
    const Mat x = 1000.0 * rng.normal_mat(6, 16);
    const Vec ones = Vec::Ones(16);
    const Mat y = rmsnorm(x, ones);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double rms = std::sqrt(y.row(i).squaredNorm() / static_cast<double>(y.cols()));
        CHECK(std::abs(rms - 1.0) <= 1e-10);
    }
}

TEST_CASE("rmsnorm matches its closed form on constant rows") {
    // A row of constant value v has mean square v^2, so each normalized entry
    // is v / sqrt(v^2 + eps) exactly.
    Mat x(1, 8);
    x.setConstant(3.0);
    const Mat y = rmsnorm(x, Vec::Ones(8));
    const double expect = 3.0 / std::sqrt(9.0 + kRmsNormEps);
    for (Eigen::Index j = 0; j < y.cols(); ++j)
        CHECK(std::abs(y(0, j) - expect) <= 1e-15);

    // The learned scale applies per column after normalization.
    Vec scale(8);
    for (int j = 0; j < 8; ++j)
        scale(j) = j + 1;
    const Mat ys = rmsnorm(x, scale);
    for (Eigen::Index j = 0; j < y.cols(); ++j)
        CHECK(ys(0, j) == y(0, j) * scale(j));
}

TEST_CASE("linear_lora applies the scaled low-rank correction") {
    Rng rng(13);
    const Mat x = rng.normal_mat(5, 6);
    const Mat w = rng.normal_mat(4, 6);
    LoraTensorPair lora;
    lora.a = rng.normal_mat(2, 6);
    lora.b = rng.normal_mat(4, 2);
    const double scale = 4.0;

    const Mat base = linear_lora(x, w, nullptr, scale);
    CHECK(mat_max_diff(base, x * w.transpose()) == 0.0);

    const Mat y = linear_lora(x, w, &lora, scale);
    const Mat expect = x * w.transpose() + scale * (x * lora.a.transpose()) * lora.b.transpose();
    CHECK(mat_max_diff(y, expect) <= 1e-12);
}

TEST_CASE("attention weights are causal and normalized") {
    const ModelBundle bundle = fixture_bundle();
    const TokenSequence probe = fixture_probe(bundle);
    const BlockActivations act =
        block_forward(bundle.config, bundle.base[0], &bundle.adapters[0].tensors.layers[0],
                      probe.embeddings);
    REQUIRE(static_cast<int>(act.probs.size()) == bundle.config.n_heads);
    const int t_count = probe.tokens();
    for (const Mat & p : act.probs) {
        REQUIRE(p.rows() == t_count);
        REQUIRE(p.cols() == t_count);
        for (int i = 0; i < t_count; ++i) {
            CHECK(std::abs(p.row(i).sum() - 1.0) <= 1e-10);
            for (int j = i + 1; j < t_count; ++j)
                CHECK(p(i, j) == 0.0);
        }
    }
}

TEST_CASE("forward trace is deterministic and anchored at the input") {
    const ModelBundle bundle = fixture_bundle();
    const TokenSequence probe = fixture_probe(bundle);
    const std::optional<std::string> tag = bundle.adapters[0].modality_tag;
    const TraceSet t1 = forward_with_trace(bundle, tag, probe);
    const TraceSet t2 = forward_with_trace(bundle, tag, probe);
    REQUIRE(t1.hidden.size() == static_cast<size_t>(bundle.config.n_layers + 1));
    CHECK(mat_equal(t1.hidden[0], probe.embeddings));
    for (size_t l = 0; l < t1.hidden.size(); ++l) {
        CHECK(mat_equal(t1.hidden[l], t2.hidden[l]));
        CHECK(t1.hidden[l].allFinite());
    }
}

TEST_CASE("single-token input runs the degenerate causal case") {
    const ModelBundle bundle = fixture_bundle();
    TokenSequence input;
    Rng rng(3);
    input.embeddings = rng.normal_mat(1, bundle.config.d_model);
    const TraceSet trace = forward_with_trace(bundle, std::nullopt, input);
    REQUIRE(trace.hidden.size() == static_cast<size_t>(bundle.config.n_layers + 1));
    for (const Mat & h : trace.hidden) {
        CHECK(h.rows() == 1);
        CHECK(h.cols() == bundle.config.d_model);
        CHECK(h.allFinite());
    }
    // With one token the attention weight matrix is the 1x1 identity.
    const BlockActivations act =
        block_forward(bundle.config, bundle.base[0], nullptr, input.embeddings);
    for (const Mat & p : act.probs)
        CHECK(p(0, 0) == 1.0);
}

TEST_CASE("perturbing the last token leaves earlier positions untouched") {
    const ModelBundle bundle = fixture_bundle();
    TokenSequence probe = fixture_probe(bundle);
    const TraceSet before = forward_with_trace(bundle, std::nullopt, probe);

    TokenSequence bumped = probe;
    bumped.embeddings.row(bumped.tokens() - 1).array() += 0.75;
    const TraceSet after = forward_with_trace(bundle, std::nullopt, bumped);

    const int t_count = probe.tokens();
    for (size_t l = 0; l < before.hidden.size(); ++l) {
        for (int i = 0; i < t_count - 1; ++i)
            CHECK(before.hidden[l].row(i) == after.hidden[l].row(i));
        if (l > 0)
            CHECK(before.hidden[l].row(t_count - 1) != after.hidden[l].row(t_count - 1));
    }
}

TEST_CASE("zeroed output projections reduce every block to the identity") {
    ModelBundle bundle = fixture_bundle();
    for (auto & w : bundle.base) {
        w.attn_o.setZero();
        w.mlp_down.setZero();
    }
    const TokenSequence probe = fixture_probe(bundle);
    const TraceSet trace = forward_with_trace(bundle, std::nullopt, probe);
    for (size_t l = 1; l < trace.hidden.size(); ++l)
        CHECK(mat_equal(trace.hidden[l], trace.hidden[0]));
}

TEST_CASE("forward rejects mismatched input width and unknown adapters") {
    const ModelBundle bundle = fixture_bundle();
    TokenSequence bad;
    Rng rng(4);
    bad.embeddings = rng.normal_mat(3, bundle.config.d_model + 1);
    CHECK_THROWS_AS(forward_with_trace(bundle, std::nullopt, bad), std::exception);

    const TokenSequence probe = fixture_probe(bundle);
    CHECK_THROWS_AS(forward_with_trace(bundle, std::optional<std::string>("nope"), probe),
                    std::exception);
}

TEST_CASE("token sequence validation catches bad spans and non-finite entries") {
    Rng rng(6);
    TokenSequence seq;
    seq.embeddings = rng.normal_mat(6, 16);
    seq.spans.push_back(Span{"m1", 1, 2});
    seq.spans.push_back(Span{"m2", 3, 3});
    CHECK_NOTHROW(seq.validate(16));

    TokenSequence overlap = seq;
    overlap.spans[1].start = 2;
    CHECK_THROWS_AS(overlap.validate(16), std::exception);

    TokenSequence oob = seq;
    oob.spans[1].length = 9;
    CHECK_THROWS_AS(oob.validate(16), std::exception);

    TokenSequence inf = seq;
    inf.embeddings(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(inf.validate(16), std::exception);

    CHECK_THROWS_AS(seq.span_for("absent"), std::exception);
    CHECK(seq.span_for("m2").start == 3);
}

TEST_CASE("extract_modality slices the span rows in position order") {
    const ModelBundle bundle = fixture_bundle();
    const TokenSequence probe = fixture_probe(bundle);
    const TraceSet trace = forward_with_trace(bundle, std::nullopt, probe);

    const Span & span = probe.span_for(bundle.modalities[0].tag);

    // Layer 0 returns exactly the span's input embeddings.
    const Mat at0 = extract_modality(trace, probe, bundle.modalities[0].tag, 0);
    REQUIRE(at0.rows() == span.length);
    for (int i = 0; i < span.length; ++i)
        CHECK(at0.row(i) == probe.embeddings.row(span.start + i));

    // Any layer slices the matching rows of that layer's hidden state.
    const int top = bundle.config.n_layers;
    const Mat attop = extract_modality(trace, probe, bundle.modalities[0].tag, top);
    for (int i = 0; i < span.length; ++i)
        CHECK(attop.row(i) == trace.hidden[static_cast<size_t>(top)].row(span.start + i));

    CHECK_THROWS_AS(extract_modality(trace, probe, "absent", 0), std::exception);
}

TEST_CASE("span extractions and text positions tile the full hidden slice") {
    const ModelBundle bundle = fixture_bundle();
    const TokenSequence probe = fixture_probe(bundle);
    const TraceSet trace = forward_with_trace(bundle, std::nullopt, probe);
    const int layer = 1;
    const Mat & full = trace.hidden[layer];

    std::vector<bool> covered(static_cast<size_t>(probe.tokens()), false);
    for (const Span & span : probe.spans) {
        const Mat block = extract_modality(trace, probe, span.tag, layer);
        REQUIRE(block.rows() == span.length);
        for (int i = 0; i < span.length; ++i) {
            CHECK(block.row(i) == full.row(span.start + i));
            covered[static_cast<size_t>(span.start + i)] = true;
        }
    }
    // Remaining rows are the text prefix positions; together the pieces are a
    // permutation of the full slice.
    int text = 0;
    for (bool c : covered)
        text += c ? 0 : 1;
    CHECK(text == probe.tokens() - 2 * 4); // two modalities with 4 block tokens each
}

TEST_CASE("extracting a length-one span yields that single hidden row") {
    const ModelBundle bundle = fixture_bundle(7);
    TokenSequence seq;
    Rng rng(8);
    seq.embeddings = rng.normal_mat(5, bundle.config.d_model);
    seq.spans.push_back(Span{"solo", 2, 1});
    const TraceSet trace = forward_with_trace(bundle, std::nullopt, seq);
    const Mat one = extract_modality(trace, seq, "solo", bundle.config.n_layers);
    REQUIRE(one.rows() == 1);
    CHECK(one.row(0) == trace.hidden.back().row(2));
}
