// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one line per criterion, "PASS <n> <description>" or
// "FAIL <n> <description> (<detail>)". Exit code is the failure count, so a
// clean run exits 0. Criteria are independent; an exception fails only its
// own criterion.

#include "esmerge/checkpoint.hpp"
#include "esmerge/grad.hpp"
#include "esmerge/merge.hpp"
#include "esmerge/pipeline.hpp"
#include "esmerge/probe.hpp"
#include "esmerge/rng.hpp"
#include "esmerge/signals.hpp"

#include "test_util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace esmerge;
using namespace esmerge::test;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(3);
    ss << v;
    return ss.str();
}

// Exhaustive-assignment oracle for the 1D transport minimum.
double permutation_min_distance(const std::vector<double> & x, const std::vector<double> & y,
                                double p) {
    std::vector<size_t> idx(y.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end());
    double best = std::numeric_limits<double>::infinity();
    do {
        double acc = 0.0;
        for (size_t i = 0; i < x.size(); ++i)
            acc += std::pow(std::abs(x[i] - y[idx[i]]), p);
        best = std::min(best, std::pow(acc / static_cast<double>(x.size()), 1.0 / p));
    } while (std::next_permutation(idx.begin(), idx.end()));
    return best;
}

std::vector<LoraTensors> simplex_tensors(const ModelConfig & config, int n_models,
                                         std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LoraTensors> raw;
    for (int m = 0; m < n_models; ++m) {
        LoraTensors t = LoraTensors::zeros(config);
        for (auto & layer : t.layers)
            for (auto & pair : layer) {
                pair.a = rng.normal_mat(static_cast<int>(pair.a.rows()),
                                        static_cast<int>(pair.a.cols()))
                             .array()
                             .exp()
                             .matrix();
                pair.b = rng.normal_mat(static_cast<int>(pair.b.rows()),
                                        static_cast<int>(pair.b.cols()))
                             .array()
                             .exp()
                             .matrix();
            }
        raw.push_back(std::move(t));
    }
    std::vector<LoraTensors> out(static_cast<size_t>(n_models), LoraTensors::zeros(config));
    for (size_t l = 0; l < raw[0].layers.size(); ++l)
        for (size_t t = 0; t < raw[0].layers[l].size(); ++t)
            for (int side = 0; side < 2; ++side) {
                const Eigen::Index n =
                    side == 0 ? raw[0].layers[l][t].a.size() : raw[0].layers[l][t].b.size();
                for (Eigen::Index i = 0; i < n; ++i) {
                    double sum = 0.0;
                    for (int m = 0; m < n_models; ++m) {
                        auto & pair = raw[static_cast<size_t>(m)].layers[l][t];
                        sum += (side == 0 ? pair.a : pair.b).data()[i];
                    }
                    for (int m = 0; m < n_models; ++m) {
                        auto & src = raw[static_cast<size_t>(m)].layers[l][t];
                        auto & dst = out[static_cast<size_t>(m)].layers[l][t];
                        (side == 0 ? dst.a : dst.b).data()[i] =
                            (side == 0 ? src.a : src.b).data()[i] / sum;
                    }
                }
            }
    return out;
}

std::vector<LoraTensors> constant_tensors(const ModelConfig & config, int n_models, double value) {
    std::vector<LoraTensors> out;
    for (int m = 0; m < n_models; ++m) {
        LoraTensors t = LoraTensors::zeros(config);
        for (auto & layer : t.layers)
            for (auto & pair : layer) {
                pair.a.setConstant(value);
                pair.b.setConstant(value);
            }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<std::string> model_names(int n) {
    std::vector<std::string> tags;
    for (int m = 0; m < n; ++m)
        tags.push_back("m" + std::to_string(m));
    return tags;
}

double simplex_gap(const std::vector<LoraTensors> & per_model) {
    double worst = 0.0;
    for (size_t l = 0; l < per_model[0].layers.size(); ++l)
        for (size_t t = 0; t < per_model[0].layers[l].size(); ++t)
            for (int side = 0; side < 2; ++side) {
                const Eigen::Index n = side == 0 ? per_model[0].layers[l][t].a.size()
                                                 : per_model[0].layers[l][t].b.size();
                for (Eigen::Index i = 0; i < n; ++i) {
                    double sum = 0.0;
                    for (const auto & lt : per_model) {
                        const auto & pair = lt.layers[l][t];
                        sum += (side == 0 ? pair.a : pair.b).data()[i];
                    }
                    worst = std::max(worst, std::abs(sum - 1.0));
                }
            }
    return worst;
}

double per_model_max_diff(const LoraTensors & a, const LoraTensors & b) {
    return esmerge::test::tensors_max_diff(a, b);
}

Outcome criterion_grad_check() {
    const auto start = std::chrono::steady_clock::now();
    const ModelBundle bundle = gen_toy_bundle(1234, ModelConfig{}, tiny_specs(3, 6));
    const ProbeBatch batch = build_probe_batch(specs_from_bundle(bundle, 8, 2), 32, 555);
    const GradCheckReport rep =
        grad_spot_check(bundle, batch, {"mod_a", "mod_b", "mod_c"}, 100, 777);
    const double elapsed = seconds_since(start);
    Outcome o;
    o.ok = rep.checked >= 100 && rep.max_rel_err <= 1e-4 && elapsed < 60.0;
    o.detail = "max rel err " + fmt(rep.max_rel_err) + " over " + std::to_string(rep.checked) +
               " coordinates, " + fmt(elapsed) + " s";
    return o;
}

Outcome criterion_sorted_coupling() {
    double worst = 0.0;
    for (int seed = 0; seed < 200; ++seed) {
        Rng rng(10000 + static_cast<std::uint64_t>(seed));
        const int k = 2 + seed % 5;
        const double p = 1.0 + static_cast<double>(seed % 3);
        std::vector<double> x(static_cast<size_t>(k));
        std::vector<double> y(static_cast<size_t>(k));
        for (double & v : x)
            v = rng.normal();
        for (double & v : y)
            v = rng.normal();
        const double sorted = wasserstein_1d(x, y, p);
        const double oracle = permutation_min_distance(x, y, p);
        worst = std::max(worst, std::abs(sorted - oracle));
    }
    Outcome o;
    o.ok = worst <= 1e-9;
    o.detail = "worst gap " + fmt(worst) + " over 200 seeds, sizes 2..6";
    return o;
}

Outcome criterion_swd_sanity() {
    Rng rng(42);
    const Mat x = rng.normal_mat(24, 8);
    const double self = swd(x, x, 64, 2.0, 9);

    std::vector<double> ray;
    for (const double c : {0.5, 1.0, 2.0}) {
        Mat y = x;
        y.col(0).array() += c;
        ray.push_back(swd(x, y, 1024, 2.0, 11));
    }
    const bool monotone = ray[0] < ray[1] && ray[1] < ray[2];

    const Mat u = rng.normal_mat(16, 1);
    const Mat v = rng.normal_mat(16, 1);
    const std::vector<double> ux(u.data(), u.data() + u.size());
    const std::vector<double> vx(v.data(), v.data() + v.size());
    double one_d_gap = 0.0;
    for (const double p : {1.0, 2.0})
        one_d_gap = std::max(one_d_gap,
                             std::abs(swd(u, v, 32, p, 13) - wasserstein_1d(ux, vx, p)));

    Outcome o;
    o.ok = self == 0.0 && monotone && one_d_gap <= 1e-12;
    o.detail = "self " + fmt(self) + ", translation curve " + fmt(ray[0]) + " < " + fmt(ray[1]) +
               " < " + fmt(ray[2]) + ", 1-d gap " + fmt(one_d_gap);
    return o;
}

Outcome criterion_matched_shift() {
    int good_seeds = 0;
    for (int s = 0; s < 20; ++s) {
        const ModelBundle bundle =
            gen_toy_bundle(1000 + static_cast<std::uint64_t>(s), ModelConfig{}, tiny_specs(3, 6));
        const ProbeBatch batch = build_probe_batch(specs_from_bundle(bundle, 8, 2), 16,
                                                   2000 + static_cast<std::uint64_t>(s));
        const SwdTable table =
            compute_swd_table(bundle, batch, 128, 2.0, 3000 + static_cast<std::uint64_t>(s));
        bool all_adapters = true;
        for (size_t i = 0; i < table.model_tags.size(); ++i) {
            std::vector<double> means(table.modality_tags.size(), 0.0);
            for (size_t m = 0; m < table.modality_tags.size(); ++m) {
                for (int l = 1; l <= table.n_layers; ++l)
                    means[m] += table.values[i][m][static_cast<size_t>(l)];
                means[m] /= static_cast<double>(table.n_layers);
            }
            // Adapter i is specialized to modality i by construction.
            for (size_t m = 0; m < means.size(); ++m)
                if (m != i && !(means[i] > means[m]))
                    all_adapters = false;
        }
        if (all_adapters)
            ++good_seeds;
    }
    Outcome o;
    o.ok = good_seeds >= 18;
    o.detail = std::to_string(good_seeds) + "/20 seeds with matched modality dominant";
    return o;
}

Outcome criterion_simplex() {
    double worst = 0.0;
    for (int s = 0; s < 10; ++s) {
        const ModelBundle bundle =
            gen_toy_bundle(4000 + static_cast<std::uint64_t>(s), ModelConfig{}, tiny_specs(3, 6));
        const ProbeBatch batch = build_probe_batch(specs_from_bundle(bundle, 8, 2), 8,
                                                   5000 + static_cast<std::uint64_t>(s));
        const SwdTable table =
            compute_swd_table(bundle, batch, 64, 2.0, 6000 + static_cast<std::uint64_t>(s));
        const LayerCoefficients lc = layer_coefficients(table, 0.5);
        for (Eigen::Index l = 0; l < lc.alpha.cols(); ++l)
            worst = std::max(worst, std::abs(lc.alpha.col(l).sum() - 1.0));

        std::vector<std::string> modality_tags;
        for (const auto & m : bundle.modalities)
            modality_tags.push_back(m.tag);
        std::vector<LoraTensors> accs;
        std::vector<const LoraTensors *> acc_ptrs;
        std::vector<std::string> model_tags;
        for (const auto & adapter : bundle.adapters) {
            accs.push_back(
                accumulate_sensitivity(bundle, adapter.modality_tag, batch, modality_tags));
            model_tags.push_back(adapter.modality_tag);
        }
        for (const auto & a : accs)
            acc_ptrs.push_back(&a);
        const ElementCoefficients ec = element_coefficients(model_tags, acc_ptrs, 0.5);
        worst = std::max(worst, simplex_gap(ec.beta));

        const FusedCoefficients fc = integrate(lc, ec);
        worst = std::max(worst, simplex_gap(fc.lambda));
    }
    Outcome o;
    o.ok = worst <= 1e-9;
    o.detail = "worst simplex gap " + fmt(worst) + " over 10 seeds";
    return o;
}

Outcome criterion_fuse_degenerations() {
    const ModelConfig config;
    const int n_models = 3;
    const auto tags = model_names(n_models);

    ElementCoefficients beta;
    beta.model_tags = tags;
    beta.tau = 0.5;
    beta.beta = simplex_tensors(config, n_models, 31);

    LayerCoefficients alpha;
    alpha.model_tags = tags;
    alpha.tau = 0.5;
    alpha.alpha = Mat::Constant(n_models, config.n_layers, 1.0 / n_models);
    const FusedCoefficients keep_beta = integrate(alpha, beta);
    double worst_beta = 0.0;
    for (int m = 0; m < n_models; ++m)
        worst_beta = std::max(worst_beta, per_model_max_diff(keep_beta.lambda[static_cast<size_t>(m)],
                                                             beta.beta[static_cast<size_t>(m)]));

    ElementCoefficients flat;
    flat.model_tags = tags;
    flat.tau = 0.5;
    flat.beta = constant_tensors(config, n_models, 1.0 / n_models);
    Rng rng(33);
    for (int l = 0; l < config.n_layers; ++l) {
        std::vector<double> scores(static_cast<size_t>(n_models));
        for (double & v : scores)
            v = rng.normal();
        const std::vector<double> col = softmax_scaled(scores, 0.5);
        for (int m = 0; m < n_models; ++m)
            alpha.alpha(m, l) = col[static_cast<size_t>(m)];
    }
    const FusedCoefficients keep_alpha = integrate(alpha, flat);
    double worst_alpha = 0.0;
    for (int m = 0; m < n_models; ++m)
        for (size_t l = 0; l < keep_alpha.lambda[static_cast<size_t>(m)].layers.size(); ++l)
            for (const auto & pair : keep_alpha.lambda[static_cast<size_t>(m)].layers[l]) {
                const double expect = alpha.alpha(m, static_cast<int>(l));
                worst_alpha = std::max(
                    worst_alpha,
                    (pair.a.array() - expect).abs().maxCoeff());
                worst_alpha = std::max(
                    worst_alpha,
                    (pair.b.array() - expect).abs().maxCoeff());
            }

    Outcome o;
    o.ok = worst_beta <= 1e-12 && worst_alpha <= 1e-12;
    o.detail = "uniform-layer gap " + fmt(worst_beta) + ", uniform-element gap " + fmt(worst_alpha);
    return o;
}

Outcome criterion_merge_degenerations() {
    const ModelBundle bundle = gen_toy_bundle(77, ModelConfig{}, tiny_specs(3, 6));
    std::vector<const LoraAdapter *> adapters;
    std::vector<std::string> tags;
    for (const auto & a : bundle.adapters) {
        adapters.push_back(&a);
        tags.push_back(a.modality_tag);
    }
    const int n = static_cast<int>(adapters.size());

    ElementCoefficients uniform;
    uniform.model_tags = tags;
    uniform.beta = constant_tensors(bundle.config, n, 1.0 / n);
    const LoraAdapter merged = merge_adapters(adapters, coeffs_from_element_only(uniform));
    const LoraAdapter averaged = avg_merge(adapters);
    const double avg_gap = per_model_max_diff(merged.tensors, averaged.tensors);

    ElementCoefficients onehot;
    onehot.model_tags = tags;
    onehot.beta = constant_tensors(bundle.config, n, 0.0);
    for (auto & layer : onehot.beta[1].layers)
        for (auto & pair : layer) {
            pair.a.setConstant(1.0);
            pair.b.setConstant(1.0);
        }
    const LoraAdapter picked = merge_adapters(adapters, coeffs_from_element_only(onehot));
    const bool exact = tensors_equal(picked.tensors, bundle.adapters[1].tensors);

    Outcome o;
    o.ok = avg_gap <= 1e-7 && exact;
    o.detail = "uniform-vs-average gap " + fmt(avg_gap) +
               std::string(exact ? ", one-hot exact" : ", one-hot differs");
    return o;
}

Outcome criterion_ties() {
    std::vector<LoraAdapter> fixture(2);
    for (auto & adapter : fixture) {
        LoraTensors t;
        t.layers.resize(1);
        t.layers[0].resize(1);
        t.layers[0][0].a = Mat(1, 2);
        t.layers[0][0].b = Mat::Constant(1, 1, 1.0);
        adapter.tensors = std::move(t);
    }
    fixture[0].modality_tag = "m0";
    fixture[1].modality_tag = "m1";
    fixture[0].tensors.layers[0][0].a << 2.0, -1.0;
    fixture[1].tensors.layers[0][0].a << -0.1, -3.0;
    const LoraAdapter traced =
        ties_merge({&fixture[0], &fixture[1]}, 0.5);
    const bool fixture_exact = traced.tensors.layers[0][0].a(0, 0) == 2.0 &&
                               traced.tensors.layers[0][0].a(0, 1) == -3.0;

    const ModelConfig config;
    Rng rng(88);
    std::vector<LoraAdapter> agreeing(3);
    for (int m = 0; m < 3; ++m) {
        agreeing[static_cast<size_t>(m)].modality_tag = "m" + std::to_string(m);
        LoraTensors t = LoraTensors::zeros(config);
        for (auto & layer : t.layers)
            for (auto & pair : layer) {
                pair.a = rng.normal_mat(static_cast<int>(pair.a.rows()),
                                        static_cast<int>(pair.a.cols()))
                             .cwiseAbs() +
                         Mat::Constant(pair.a.rows(), pair.a.cols(), 0.01);
                pair.b = rng.normal_mat(static_cast<int>(pair.b.rows()),
                                        static_cast<int>(pair.b.cols()))
                             .cwiseAbs() +
                         Mat::Constant(pair.b.rows(), pair.b.cols(), 0.01);
            }
        agreeing[static_cast<size_t>(m)].tensors = std::move(t);
    }
    std::vector<const LoraAdapter *> ptrs{&agreeing[0], &agreeing[1], &agreeing[2]};
    const double agree_gap =
        per_model_max_diff(ties_merge(ptrs, 1.0).tensors, avg_merge(ptrs).tensors);

    Outcome o;
    o.ok = fixture_exact && agree_gap <= 1e-12;
    o.detail = std::string(fixture_exact ? "fixture exact" : "fixture wrong") +
               ", sign-agreeing full-keep gap " + fmt(agree_gap);
    return o;
}

Outcome run_pipeline_into(const std::filesystem::path & dir, const std::filesystem::path & scratch) {
    Outcome o;
    const CliResult gen =
        run_cli("gen-toy --seed 42 --out \"" + dir.string() + "\"", scratch);
    if (gen.exit_code != 0) {
        o.detail = "gen-toy exited " + std::to_string(gen.exit_code);
        return o;
    }
    const CliResult co =
        run_cli("coeffs --seed 42 --out \"" + dir.string() + "\"", scratch);
    if (co.exit_code != 0) {
        o.detail = "coeffs exited " + std::to_string(co.exit_code);
        return o;
    }
    const CliResult mg =
        run_cli("merge --seed 42 --method es --out \"" + dir.string() + "\"", scratch);
    if (mg.exit_code != 0) {
        o.detail = "merge exited " + std::to_string(mg.exit_code);
        return o;
    }
    o.ok = true;
    return o;
}

Outcome criterion_determinism() {
    if (cli_path().empty())
        return {false, "ESMERGE_BIN not set"};
    const auto start = std::chrono::steady_clock::now();
    TempDir scratch;
    const auto d1 = scratch.path / "run1";
    const auto d2 = scratch.path / "run2";
    for (const auto & dir : {d1, d2}) {
        const Outcome step = run_pipeline_into(dir, scratch.path);
        if (!step.ok)
            return step;
    }
    for (const char * name : {"bundle.esmg", "layer_coeffs.csv", "element_coeffs.esmg",
                              "fused_coeffs.esmg", "merged_es.esmg"}) {
        if (read_bytes(d1 / name) != read_bytes(d2 / name))
            return {false, std::string(name) + " differs between reruns"};
    }
    const double elapsed = seconds_since(start);
    Outcome o;
    o.ok = elapsed < 300.0;
    o.detail = "5 artifacts byte-identical, " + fmt(elapsed) + " s";
    return o;
}

Outcome criterion_granularity_ablation() {
    if (cli_path().empty())
        return {false, "ESMERGE_BIN not set"};
    TempDir scratch;
    const auto dir = scratch.path / "run";
    if (run_cli("gen-toy --seed 7 --out \"" + dir.string() + "\"", scratch.path).exit_code != 0)
        return {false, "gen-toy failed"};
    if (run_cli("coeffs --seed 7 --k 16 --projections 128 --out \"" + dir.string() + "\"",
                scratch.path)
            .exit_code != 0)
        return {false, "coeffs failed"};
    for (const char * method : {"es-layer", "es-element", "es"}) {
        if (run_cli("merge --method " + std::string(method) + " --out \"" + dir.string() + "\"",
                    scratch.path)
                .exit_code != 0)
            return {false, std::string("merge --method ") + method + " failed"};
    }
    const LoraAdapter by_layer =
        adapter_from_file(read_tensor_file(dir / "merged_es-layer.esmg"));
    const LoraAdapter by_element =
        adapter_from_file(read_tensor_file(dir / "merged_es-element.esmg"));
    const LoraAdapter fused = adapter_from_file(read_tensor_file(dir / "merged_es.esmg"));

    const double layer_vs_element = per_model_max_diff(by_layer.tensors, by_element.tensors);
    const double layer_vs_fused = per_model_max_diff(by_layer.tensors, fused.tensors);
    const double element_vs_fused = per_model_max_diff(by_element.tensors, fused.tensors);

    Outcome o;
    o.ok = layer_vs_element > 1e-6 && layer_vs_fused > 1e-6 && element_vs_fused > 1e-6;
    o.detail = "pairwise max-entry gaps " + fmt(layer_vs_element) + ", " + fmt(layer_vs_fused) +
               ", " + fmt(element_vs_fused);
    return o;
}

} // namespace

int main() {
    struct Criterion {
        int id;
        const char * description;
        std::function<Outcome()> fn;
    };
    const std::vector<Criterion> criteria{
        {1, "analytic layer-distance gradients match central finite differences",
         criterion_grad_check},
        {2, "sorted coupling attains the exact 1D transport minimum", criterion_sorted_coupling},
        {3, "sliced distance identity, translation monotonicity, and 1D equivalence",
         criterion_swd_sanity},
        {4, "matched-modality representational shift dominates unmatched modalities",
         criterion_matched_shift},
        {5, "layer, element, and fused coefficients stay on the simplex", criterion_simplex},
        {6, "fusing with a uniform factor recovers the other factor", criterion_fuse_degenerations},
        {7, "uniform weights reduce to averaging and one-hot weights select",
         criterion_merge_degenerations},
        {8, "trim/elect/merge hand fixture and sign-agreeing degeneration", criterion_ties},
        {9, "seeded pipeline reruns produce byte-identical artifacts", criterion_determinism},
        {10, "layer, element, and fused weighting produce distinct merges",
         criterion_granularity_ablation},
    };

    int failures = 0;
    for (const Criterion & c : criteria) {
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception & e) {
            o.ok = false;
            o.detail = std::string("exception: ") + e.what();
        }
        if (!o.ok)
            ++failures;
        std::cout << (o.ok ? "PASS " : "FAIL ") << c.id << " " << c.description;
        if (!o.detail.empty())
            std::cout << " (" << o.detail << ")";
        std::cout << "\n";
    }
    return failures;
}
