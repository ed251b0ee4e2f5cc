// SPDX-License-Identifier: Apache-2.0

#include "esmerge/probe.hpp"

#include "esmerge/rng.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace esmerge {

namespace {

enum : std::uint64_t { kStreamText = 11, kStreamBlock = 12 };

constexpr double kBlockNoise = 0.05;

} // namespace

void ModalitySpec::validate(int d_model) const {
    if (tag.empty())
        throw std::invalid_argument("modality tag must be nonempty");
    if (subspace.cols() != d_model)
        throw std::invalid_argument("modality '" + tag + "': subspace width != d_model");
    if (subspace.rows() < 1 || subspace.rows() > d_model)
        throw std::invalid_argument("modality '" + tag + "': bad subspace rank");
    const Mat gram = subspace * subspace.transpose();
    const Mat eye = Mat::Identity(subspace.rows(), subspace.rows());
    if ((gram - eye).cwiseAbs().maxCoeff() > 1e-8)
        throw std::invalid_argument("modality '" + tag + "': subspace rows not orthonormal");
    if (tokens_per_block < 1)
        throw std::invalid_argument("modality '" + tag + "': tokens_per_block must be >= 1");
    if (prefix_tokens < 0)
        throw std::invalid_argument("modality '" + tag + "': negative prefix_tokens");
}

ProbeBatch build_probe_batch(const std::vector<ModalitySpec> & specs, int k, std::uint64_t seed) {
    if (specs.empty())
        throw std::invalid_argument("build_probe_batch: no modalities");
    // Distribution distances downstream need at least two samples per set.
    if (k < 2)
        throw std::invalid_argument("build_probe_batch: k must be >= 2");
    const int d_model = static_cast<int>(specs.front().subspace.cols());
    std::set<std::string> tags;
    for (const auto & spec : specs) {
        spec.validate(d_model);
        if (!tags.insert(spec.tag).second)
            throw std::invalid_argument("build_probe_batch: duplicate tag '" + spec.tag + "'");
    }

    int total = 0;
    for (const auto & spec : specs)
        total += spec.prefix_tokens + spec.tokens_per_block;

    ProbeBatch batch;
    batch.seed = seed;
    batch.probes.resize(static_cast<size_t>(k));
    for (int p = 0; p < k; ++p) {
        TokenSequence & seq = batch.probes[static_cast<size_t>(p)];
        seq.embeddings = Mat(total, d_model);
        int pos = 0;
        for (size_t mi = 0; mi < specs.size(); ++mi) {
            const ModalitySpec & spec = specs[mi];
            // Text prefix: plain isotropic context tokens at embedding scale.
            Rng text_rng(mix_seed(seed, kStreamText, static_cast<std::uint64_t>(p), mi));
            for (int t = 0; t < spec.prefix_tokens; ++t)
                seq.embeddings.row(pos++) =
                    text_rng.normal_vec(d_model, 1.0 / std::sqrt(static_cast<double>(d_model)))
                        .transpose();
            // Modality block: unit coefficients through the basis plus faint
            // full-space noise, so the block lives almost entirely inside the
            // designated subspace.
            Rng block_rng(mix_seed(seed, kStreamBlock, static_cast<std::uint64_t>(p), mi));
            Span span;
            span.tag = spec.tag;
            span.start = pos;
            span.length = spec.tokens_per_block;
            for (int t = 0; t < spec.tokens_per_block; ++t) {
                const Vec coeff = block_rng.normal_vec(static_cast<int>(spec.subspace.rows()));
                const Vec noise = block_rng.normal_vec(d_model, kBlockNoise);
                seq.embeddings.row(pos++) = (spec.subspace.transpose() * coeff + noise).transpose();
            }
            seq.spans.push_back(std::move(span));
        }
        seq.validate(d_model);
    }
    return batch;
}

Vec mean_pool(const Mat & block) {
    if (block.rows() < 1)
        throw std::invalid_argument("mean_pool: empty block");
    return block.colwise().mean().transpose();
}

std::pair<Mat, Mat> collect_layer_sets(const std::vector<TraceSet> & base_traces,
                                       const std::vector<TraceSet> & spec_traces,
                                       const ProbeBatch & batch, std::string_view modality,
                                       int layer) {
    const int k = batch.count();
    if (static_cast<int>(base_traces.size()) != k || static_cast<int>(spec_traces.size()) != k)
        throw std::invalid_argument("collect_layer_sets: trace count != probe count");
    if (k < 1)
        throw std::invalid_argument("collect_layer_sets: empty batch");
    const int d_model = static_cast<int>(batch.probes.front().embeddings.cols());
    Mat base_set(k, d_model);
    Mat spec_set(k, d_model);
    for (int i = 0; i < k; ++i) {
        // Traces tagged with a probe id must line up with the batch order.
        if (base_traces[static_cast<size_t>(i)].probe_id >= 0 &&
            base_traces[static_cast<size_t>(i)].probe_id != i)
            throw std::invalid_argument("collect_layer_sets: base trace batch mismatch");
        if (spec_traces[static_cast<size_t>(i)].probe_id >= 0 &&
            spec_traces[static_cast<size_t>(i)].probe_id != i)
            throw std::invalid_argument("collect_layer_sets: specialized trace batch mismatch");
        const TokenSequence & probe = batch.probes[static_cast<size_t>(i)];
        base_set.row(i) =
            mean_pool(extract_modality(base_traces[static_cast<size_t>(i)], probe, modality, layer))
                .transpose();
        spec_set.row(i) =
            mean_pool(extract_modality(spec_traces[static_cast<size_t>(i)], probe, modality, layer))
                .transpose();
    }
    return {std::move(base_set), std::move(spec_set)};
}

TensorFile probe_batch_to_file(const ProbeBatch & batch) {
    TensorFile file;
    file.extra["kind"] = "probes";
    file.extra["seed"] = batch.seed;
    json metas = json::array();
    for (size_t k = 0; k < batch.probes.size(); ++k) {
        const TokenSequence & seq = batch.probes[k];
        json spans = json::array();
        for (const Span & s : seq.spans)
            spans.push_back(json{{"tag", s.tag}, {"start", s.start}, {"length", s.length}});
        metas.push_back(json{{"spans", spans}});
        NamedTensor t;
        t.name = "probe/" + std::to_string(k) + "/embeddings";
        t.shape = {seq.embeddings.rows(), seq.embeddings.cols()};
        t.values.assign(seq.embeddings.data(), seq.embeddings.data() + seq.embeddings.size());
        file.tensors.push_back(std::move(t));
    }
    file.extra["probes"] = metas;
    return file;
}

ProbeBatch probe_batch_from_file(const TensorFile & file) {
    if (file.extra.value("kind", "") != "probes")
        throw std::runtime_error("container is not a probe batch");
    ProbeBatch batch;
    batch.seed = file.extra.at("seed").get<std::uint64_t>();
    const json & metas = file.extra.at("probes");
    for (size_t k = 0; k < metas.size(); ++k) {
        const NamedTensor & t = file.require("probe/" + std::to_string(k) + "/embeddings");
        if (t.shape.size() != 2)
            throw std::runtime_error("probe tensor must be rank 2");
        TokenSequence seq;
        seq.embeddings = Mat(t.shape[0], t.shape[1]);
        std::copy(t.values.begin(), t.values.end(), seq.embeddings.data());
        for (const auto & sj : metas[k].at("spans")) {
            Span s;
            s.tag = sj.at("tag").get<std::string>();
            s.start = sj.at("start").get<int>();
            s.length = sj.at("length").get<int>();
            seq.spans.push_back(std::move(s));
        }
        seq.validate(static_cast<int>(seq.embeddings.cols()));
        batch.probes.push_back(std::move(seq));
    }
    return batch;
}

std::vector<ModalitySpec> specs_from_bundle(const ModelBundle & bundle, int tokens_per_block,
                                            int prefix_tokens) {
    std::vector<ModalitySpec> specs;
    specs.reserve(bundle.modalities.size());
    for (const auto & info : bundle.modalities) {
        ModalitySpec spec;
        spec.tag = info.tag;
        spec.subspace = info.subspace;
        spec.tokens_per_block = tokens_per_block;
        spec.prefix_tokens = prefix_tokens;
        specs.push_back(std::move(spec));
    }
    return specs;
}

} // namespace esmerge
