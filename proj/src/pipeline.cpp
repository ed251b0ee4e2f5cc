// SPDX-License-Identifier: Apache-2.0

#include "esmerge/pipeline.hpp"

#include "esmerge/grad.hpp"
#include "esmerge/parallel.hpp"
#include "esmerge/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace esmerge {

namespace {

enum : std::uint64_t { kStreamSwd = 21, kStreamGradCheck = 22 };

constexpr double kGradCheckTol = 1e-4;
constexpr double kGradKinkFloor = 1e-6;

std::string tag_for_index(int i) {
    if (i < 26)
        return std::string("mod_") + static_cast<char>('a' + i);
    return "mod_" + std::to_string(i + 1);
}

void require_out(const RunConfig & rc) {
    if (rc.out.empty())
        throw std::invalid_argument("--out is required");
}

std::filesystem::path resolved_bundle_path(const RunConfig & rc) {
    return rc.bundle_path.empty() ? rc.out / kBundleFile : rc.bundle_path;
}

std::filesystem::path resolved_coeffs_path(const RunConfig & rc, const char * filename) {
    if (rc.coeffs_dir.empty())
        return rc.out / filename;
    if (std::filesystem::is_directory(rc.coeffs_dir))
        return rc.coeffs_dir / filename;
    return rc.coeffs_dir;
}

void note_written(const std::filesystem::path & path) {
    std::cout << "wrote " << path.string() << " (digest " << file_digest(path) << ")\n";
}

json input_entry(const std::filesystem::path & path) {
    return json{{"file", path.filename().string()}, {"digest", file_digest(path)}};
}

std::string csv_comment(const json & provenance) {
    return "# provenance: " + provenance.dump() + "\n";
}

void write_text(const std::filesystem::path & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out)
        throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_csv_line(const std::string & line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

// Writes the per-(model, layer, target) coefficient tensors in the fixed
// model-major order under coef/<model>/<layer>/<target>/{A,B}. Coefficients
// must sum to one across models at 1e-9 after a file roundtrip, tighter than
// a single f32 payload carries, so each matrix persists at split precision
// as an exactly-f32-representable pair (hi in A/B, residual in A_lo/B_lo).
void append_coef_tensors(TensorFile & file, const std::vector<std::string> & model_tags,
                         const std::vector<LoraTensors> & per_model, const ModelConfig & config) {
    auto push_split = [&file](const std::string & name, const Mat & m) {
        Mat hi;
        Mat lo;
        split_f32_parts(m, hi, lo);
        NamedTensor th;
        th.name = name;
        th.shape = {m.rows(), m.cols()};
        th.values.assign(hi.data(), hi.data() + hi.size());
        file.tensors.push_back(std::move(th));
        NamedTensor tl;
        tl.name = name + "_lo";
        tl.shape = {m.rows(), m.cols()};
        tl.values.assign(lo.data(), lo.data() + lo.size());
        file.tensors.push_back(std::move(tl));
    };
    for (size_t mi = 0; mi < model_tags.size(); ++mi) {
        const LoraTensors & lt = per_model[mi];
        for (int l = 0; l < lt.n_layers(); ++l) {
            for (size_t ti = 0; ti < lt.layers[static_cast<size_t>(l)].size(); ++ti) {
                const Target t = config.lora_targets[ti];
                const std::string prefix = "coef/" + model_tags[mi] + "/" +
                                           std::to_string(l + 1) + "/" + target_name(t) + "/";
                const auto & pair = lt.layers[static_cast<size_t>(l)][ti];
                push_split(prefix + "A", pair.a);
                push_split(prefix + "B", pair.b);
            }
        }
    }
}

std::vector<LoraTensors> read_coef_tensors(const TensorFile & file,
                                           const std::vector<std::string> & model_tags,
                                           const ModelConfig & config) {
    auto load_split = [&file](const std::string & name, Mat & out) {
        const NamedTensor & th = file.require(name);
        const NamedTensor & tl = file.require(name + "_lo");
        if (th.shape != std::vector<std::int64_t>{out.rows(), out.cols()} ||
            tl.shape != th.shape)
            throw std::runtime_error("coefficient tensor shape mismatch at " + name);
        for (Eigen::Index i = 0; i < out.size(); ++i)
            out.data()[i] = th.values[static_cast<size_t>(i)] + tl.values[static_cast<size_t>(i)];
    };
    std::vector<LoraTensors> per_model;
    per_model.reserve(model_tags.size());
    for (const std::string & tag : model_tags) {
        LoraTensors lt = LoraTensors::zeros(config);
        for (int l = 0; l < lt.n_layers(); ++l) {
            for (size_t ti = 0; ti < lt.layers[static_cast<size_t>(l)].size(); ++ti) {
                const Target t = config.lora_targets[ti];
                const std::string prefix =
                    "coef/" + tag + "/" + std::to_string(l + 1) + "/" + target_name(t) + "/";
                auto & pair = lt.layers[static_cast<size_t>(l)][ti];
                load_split(prefix + "A", pair.a);
                load_split(prefix + "B", pair.b);
            }
        }
        per_model.push_back(std::move(lt));
    }
    return per_model;
}

void validate_common(const RunConfig & rc) {
    if (!(rc.p >= 1.0))
        throw std::invalid_argument("--p must be >= 1");
    if (!(rc.tau > 0.0))
        throw std::invalid_argument("--tau must be positive");
    if (rc.k < 1)
        throw std::invalid_argument("--k must be >= 1");
    if (rc.projections < 1)
        throw std::invalid_argument("--projections must be >= 1");
}

} // namespace

std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<TraceSet> trace_batch(const ModelBundle & bundle, const std::string & tag,
                                  const ProbeBatch & batch) {
    std::vector<TraceSet> traces(static_cast<size_t>(batch.count()));
    parallel_for(batch.count(), [&](int i) {
        traces[static_cast<size_t>(i)] = forward_with_trace(
            bundle, tag.empty() ? std::nullopt : std::optional<std::string>(tag),
            batch.probes[static_cast<size_t>(i)]);
        traces[static_cast<size_t>(i)].probe_id = i;
    });
    return traces;
}

SwdTable compute_swd_table(const ModelBundle & bundle, const ProbeBatch & batch,
                           int n_projections, double p, std::uint64_t seed) {
    SwdTable table;
    for (const auto & a : bundle.adapters)
        table.model_tags.push_back(a.modality_tag);
    for (const auto & m : bundle.modalities)
        table.modality_tags.push_back(m.tag);
    table.n_layers = bundle.config.n_layers;

    const std::vector<TraceSet> base_traces = trace_batch(bundle, std::string(), batch);
    std::vector<std::vector<TraceSet>> spec_traces;
    spec_traces.reserve(table.model_tags.size());
    for (const std::string & tag : table.model_tags)
        spec_traces.push_back(trace_batch(bundle, tag, batch));

    const int n_models = static_cast<int>(table.model_tags.size());
    const int n_modalities = static_cast<int>(table.modality_tags.size());
    const int curve = table.n_layers + 1;
    table.values.assign(static_cast<size_t>(n_models),
                        std::vector<std::vector<double>>(
                            static_cast<size_t>(n_modalities),
                            std::vector<double>(static_cast<size_t>(curve), 0.0)));
    // Cells are independent; each rebuilds its direction generator from the
    // layer-derived seed, so layers share directions across cells and the
    // result is worker-count independent.
    parallel_for(n_models * n_modalities * curve, [&](int flat) {
        const int i = flat / (n_modalities * curve);
        const int rest = flat % (n_modalities * curve);
        const int m = rest / curve;
        const int l = rest % curve;
        const auto sets = collect_layer_sets(base_traces, spec_traces[static_cast<size_t>(i)],
                                             batch, table.modality_tags[static_cast<size_t>(m)], l);
        table.values[static_cast<size_t>(i)][static_cast<size_t>(m)][static_cast<size_t>(l)] =
            swd(sets.first, sets.second, n_projections, p,
                mix_seed(seed, kStreamSwd, static_cast<std::uint64_t>(l)));
    });
    table.validate();
    return table;
}

std::string layer_coeffs_csv(const LayerCoefficients & lc, const json & provenance) {
    std::string out = csv_comment(provenance);
    out += "model,layer,alpha,s";
    for (const auto & m : lc.modality_tags)
        out += ",d_hat_" + m;
    out += "\n";
    const int n_layers = static_cast<int>(lc.alpha.cols());
    for (size_t mi = 0; mi < lc.model_tags.size(); ++mi) {
        for (int l = 0; l < n_layers; ++l) {
            out += lc.model_tags[mi] + "," + std::to_string(l + 1) + "," +
                   format_g17(lc.alpha(static_cast<int>(mi), l)) + "," +
                   format_g17(lc.scores(static_cast<int>(mi), l));
            for (size_t m = 0; m < lc.modality_tags.size(); ++m)
                out += "," + format_g17(lc.d_hat[mi][m][static_cast<size_t>(l)]);
            out += "\n";
        }
    }
    return out;
}

LayerCoefficients layer_coeffs_from_csv(const std::string & text) {
    std::istringstream in(text);
    std::string line;
    json provenance;
    std::vector<std::string> header;
    struct Row {
        std::string model;
        int layer;
        double alpha, s;
        std::vector<double> d_hat;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        if (line.rfind("# provenance: ", 0) == 0) {
            provenance = json::parse(line.substr(14));
            continue;
        }
        if (line[0] == '#')
            continue;
        if (header.empty()) {
            header = split_csv_line(line);
            if (header.size() < 4 || header[0] != "model" || header[1] != "layer" ||
                header[2] != "alpha" || header[3] != "s")
                throw std::runtime_error("layer coefficient CSV: unexpected header");
            continue;
        }
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw std::runtime_error("layer coefficient CSV: ragged row");
        Row r;
        r.model = fields[0];
        r.layer = std::stoi(fields[1]);
        r.alpha = std::stod(fields[2]);
        r.s = std::stod(fields[3]);
        for (size_t i = 4; i < fields.size(); ++i)
            r.d_hat.push_back(std::stod(fields[i]));
        rows.push_back(std::move(r));
    }
    if (rows.empty())
        throw std::runtime_error("layer coefficient CSV: no data rows");

    LayerCoefficients lc;
    for (size_t i = 4; i < header.size(); ++i) {
        if (header[i].rfind("d_hat_", 0) != 0)
            throw std::runtime_error("layer coefficient CSV: unexpected column " + header[i]);
        lc.modality_tags.push_back(header[i].substr(6));
    }
    int n_layers = 0;
    for (const Row & r : rows) {
        bool known = false;
        for (const auto & t : lc.model_tags)
            known = known || t == r.model;
        if (!known)
            lc.model_tags.push_back(r.model);
        n_layers = std::max(n_layers, r.layer);
    }
    const int n_models = static_cast<int>(lc.model_tags.size());
    if (static_cast<int>(rows.size()) != n_models * n_layers)
        throw std::runtime_error("layer coefficient CSV: incomplete model/layer grid");
    lc.tau = provenance.is_object() && provenance.contains("tau")
                 ? provenance.at("tau").get<double>()
                 : 0.5;
    lc.alpha = Mat::Zero(n_models, n_layers);
    lc.scores = Mat::Zero(n_models, n_layers);
    lc.d_hat.assign(static_cast<size_t>(n_models),
                    std::vector<std::vector<double>>(
                        lc.modality_tags.size(), std::vector<double>(static_cast<size_t>(n_layers), 0.0)));
    for (const Row & r : rows) {
        int mi = -1;
        for (size_t i = 0; i < lc.model_tags.size(); ++i)
            if (lc.model_tags[i] == r.model)
                mi = static_cast<int>(i);
        if (r.layer < 1 || r.layer > n_layers)
            throw std::runtime_error("layer coefficient CSV: layer index out of range");
        lc.alpha(mi, r.layer - 1) = r.alpha;
        lc.scores(mi, r.layer - 1) = r.s;
        if (r.d_hat.size() != lc.modality_tags.size())
            throw std::runtime_error("layer coefficient CSV: d_hat column mismatch");
        for (size_t m = 0; m < r.d_hat.size(); ++m)
            lc.d_hat[static_cast<size_t>(mi)][m][static_cast<size_t>(r.layer - 1)] = r.d_hat[m];
    }
    return lc;
}

TensorFile element_coeffs_to_file(const ElementCoefficients & ec, const ModelConfig & config,
                                  const json & provenance) {
    if (ec.beta.empty())
        throw std::invalid_argument("element_coeffs_to_file: empty coefficients");
    TensorFile file;
    file.extra["kind"] = "coeffs";
    file.extra["granularity"] = "element";
    file.extra["model_tags"] = ec.model_tags;
    file.extra["tau"] = ec.tau;
    if (!provenance.empty())
        file.extra["provenance"] = provenance;
    file.extra["config"] = config_to_json(config);
    append_coef_tensors(file, ec.model_tags, ec.beta, config);
    return file;
}

ElementCoefficients element_coeffs_from_file(const TensorFile & file) {
    if (file.extra.value("kind", "") != "coeffs" ||
        file.extra.value("granularity", "") != "element")
        throw std::runtime_error("container is not an element coefficient file");
    ElementCoefficients ec;
    ec.model_tags = file.extra.at("model_tags").get<std::vector<std::string>>();
    ec.tau = file.extra.at("tau").get<double>();
    const ModelConfig config = config_from_json(file.extra.at("config"));
    ec.beta = read_coef_tensors(file, ec.model_tags, config);
    return ec;
}

TensorFile fused_coeffs_to_file(const FusedCoefficients & fc, const ModelConfig & config,
                                const json & provenance) {
    if (fc.lambda.empty())
        throw std::invalid_argument("fused_coeffs_to_file: empty coefficients");
    TensorFile file;
    file.extra["kind"] = "coeffs";
    file.extra["granularity"] = "fused";
    file.extra["source"] = fc.source;
    file.extra["model_tags"] = fc.model_tags;
    if (!provenance.empty())
        file.extra["provenance"] = provenance;
    file.extra["config"] = config_to_json(config);
    append_coef_tensors(file, fc.model_tags, fc.lambda, config);
    return file;
}

FusedCoefficients fused_coeffs_from_file(const TensorFile & file) {
    if (file.extra.value("kind", "") != "coeffs" || file.extra.value("granularity", "") != "fused")
        throw std::runtime_error("container is not a fused coefficient file");
    FusedCoefficients fc;
    fc.model_tags = file.extra.at("model_tags").get<std::vector<std::string>>();
    fc.source = file.extra.value("source", "fused");
    const ModelConfig config = config_from_json(file.extra.at("config"));
    fc.lambda = read_coef_tensors(file, fc.model_tags, config);
    return fc;
}

int cmd_gen_toy(const RunConfig & rc) {
    require_out(rc);
    if (rc.n_models < 1)
        throw std::invalid_argument("--models must be >= 1");
    std::vector<ToyModalitySpec> specs;
    for (int i = 0; i < rc.n_models; ++i)
        specs.push_back(ToyModalitySpec{tag_for_index(i), rc.subspace_dim});

    const ModelBundle bundle = gen_toy_bundle(rc.seed, rc.model, specs);
    std::filesystem::create_directories(rc.out);
    json provenance{{"command", "gen-toy"},
                    {"seed", rc.seed},
                    {"models", rc.n_models},
                    {"subspace_dim", rc.subspace_dim},
                    {"config", config_to_json(rc.model)}};
    const auto path = rc.out / kBundleFile;
    write_bundle(path, bundle, provenance);
    note_written(path);
    return kExitOk;
}

int cmd_coeffs(const RunConfig & rc) {
    require_out(rc);
    validate_common(rc);
    if (rc.mode != "layer" && rc.mode != "element" && rc.mode != "fused")
        throw std::invalid_argument("--mode must be layer, element, or fused");

    const auto bundle_path = resolved_bundle_path(rc);
    const ModelBundle bundle = read_bundle(bundle_path);
    if (bundle.adapters.empty())
        throw std::runtime_error("bundle has no adapters");
    const ProbeBatch batch = build_probe_batch(
        specs_from_bundle(bundle, rc.tokens_per_block, rc.prefix_tokens), rc.k, rc.seed);

    std::vector<std::string> modality_tags;
    for (const auto & m : bundle.modalities)
        modality_tags.push_back(m.tag);

    if (rc.check_grads > 0) {
        const GradCheckReport rep =
            grad_spot_check(bundle, batch, modality_tags, rc.check_grads, rc.seed);
        std::cout << "grad-check: max relative error " << format_g17(rep.max_rel_err) << " over "
                  << rep.checked << " coordinates\n";
        if (!(rep.max_rel_err <= kGradCheckTol)) {
            std::cerr << "grad-check failed: error exceeds tolerance " << kGradCheckTol << "\n";
            return kExitVerification;
        }
    }

    json provenance{{"command", "coeffs"},         {"seed", rc.seed},
                    {"k", rc.k},                   {"tokens_per_block", rc.tokens_per_block},
                    {"prefix_tokens", rc.prefix_tokens},
                    {"projections", rc.projections},
                    {"p", rc.p},                   {"tau", rc.tau},
                    {"mode", rc.mode},             {"inputs", json::array({input_entry(bundle_path)})}};

    std::filesystem::create_directories(rc.out);

    LayerCoefficients lc;
    const bool want_layer = rc.mode == "layer" || rc.mode == "fused";
    const bool want_element = rc.mode == "element" || rc.mode == "fused";
    if (want_layer) {
        const SwdTable table =
            compute_swd_table(bundle, batch, rc.projections, rc.p, rc.seed);
        lc = layer_coefficients(table, rc.tau);
        const auto path = rc.out / kLayerCoeffsFile;
        write_text(path, layer_coeffs_csv(lc, provenance));
        note_written(path);
    }
    ElementCoefficients ec;
    if (want_element) {
        std::vector<LoraTensors> accs;
        std::vector<const LoraTensors *> acc_ptrs;
        accs.reserve(bundle.adapters.size());
        for (const auto & adapter : bundle.adapters)
            accs.push_back(
                accumulate_sensitivity(bundle, adapter.modality_tag, batch, modality_tags));
        for (const auto & a : accs)
            acc_ptrs.push_back(&a);
        std::vector<std::string> model_tags;
        for (const auto & adapter : bundle.adapters)
            model_tags.push_back(adapter.modality_tag);
        ec = element_coefficients(model_tags, acc_ptrs, rc.tau);
        const auto path = rc.out / kElementCoeffsFile;
        write_tensor_file(path, element_coeffs_to_file(ec, bundle.config, provenance));
        note_written(path);
    }
    if (rc.mode == "fused") {
        const FusedCoefficients fc = integrate(lc, ec);
        const auto path = rc.out / kFusedCoeffsFile;
        write_tensor_file(path, fused_coeffs_to_file(fc, bundle.config, provenance));
        note_written(path);
    }
    return kExitOk;
}

int cmd_merge(const RunConfig & rc) {
    require_out(rc);
    if (rc.method != "es" && rc.method != "es-layer" && rc.method != "es-element" &&
        rc.method != "avg" && rc.method != "ties")
        throw std::invalid_argument("--method must be es, es-layer, es-element, avg, or ties");

    const auto bundle_path = resolved_bundle_path(rc);
    const ModelBundle bundle = read_bundle(bundle_path);
    if (bundle.adapters.empty())
        throw std::runtime_error("bundle has no adapters");

    json inputs = json::array({input_entry(bundle_path)});
    LoraAdapter merged;
    if (rc.method == "avg" || rc.method == "ties") {
        std::vector<const LoraAdapter *> adapters;
        for (const auto & a : bundle.adapters)
            adapters.push_back(&a);
        merged = rc.method == "avg" ? avg_merge(adapters) : ties_merge(adapters, rc.trim);
    } else {
        FusedCoefficients fc;
        if (rc.method == "es") {
            const auto path = resolved_coeffs_path(rc, kFusedCoeffsFile);
            fc = fused_coeffs_from_file(read_tensor_file(path));
            inputs.push_back(input_entry(path));
        } else if (rc.method == "es-element") {
            const auto path = resolved_coeffs_path(rc, kElementCoeffsFile);
            fc = coeffs_from_element_only(element_coeffs_from_file(read_tensor_file(path)));
            inputs.push_back(input_entry(path));
        } else {
            const auto path = resolved_coeffs_path(rc, kLayerCoeffsFile);
            const LayerCoefficients lc = layer_coeffs_from_csv(read_text(path));
            fc = coeffs_from_layer_only(lc, bundle.adapters.front().tensors);
            inputs.push_back(input_entry(path));
        }
        // Coefficient model order is authoritative; adapters are looked up by tag.
        std::vector<const LoraAdapter *> adapters;
        for (const std::string & tag : fc.model_tags) {
            const LoraAdapter * a = bundle.find_adapter(tag);
            if (a == nullptr)
                throw std::runtime_error("coefficient model '" + tag + "' not found in bundle");
            adapters.push_back(a);
        }
        merged = merge_adapters(adapters, fc);
    }

    json provenance{{"command", "merge"}, {"seed", rc.seed},   {"method", rc.method},
                    {"trim", rc.trim},    {"inputs", inputs}};
    std::filesystem::create_directories(rc.out);
    const auto path = rc.out / ("merged_" + rc.method + ".esmg");
    write_tensor_file(path, adapter_to_file(merged, bundle.config, provenance));
    note_written(path);
    return kExitOk;
}

GradCheckReport grad_spot_check(const ModelBundle & bundle, const ProbeBatch & batch,
                                const std::vector<std::string> & modalities, int samples,
                                std::uint64_t seed) {
    if (samples < 1)
        throw std::invalid_argument("grad_spot_check: samples must be >= 1");
    if (bundle.adapters.empty() || modalities.empty() || batch.count() < 1)
        throw std::invalid_argument("grad_spot_check: nothing to sample");
    Rng rng(mix_seed(seed, kStreamGradCheck));
    const ModelConfig & config = bundle.config;
    constexpr double kStep = 1e-5;

    GradCheckReport rep;
    const int max_attempts = samples * 50;
    for (int attempt = 0; attempt < max_attempts && rep.checked < samples; ++attempt) {
        const auto & adapter =
            bundle.adapters[static_cast<size_t>(rng.next_u64() % bundle.adapters.size())];
        const int probe_i = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(batch.count()));
        const TokenSequence & probe = batch.probes[static_cast<size_t>(probe_i)];
        const std::string & modality =
            modalities[static_cast<size_t>(rng.next_u64() % modalities.size())];
        const int layer =
            1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(config.n_layers));
        ElementCoord coord;
        coord.target_index =
            static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(config.lora_targets.size()));
        coord.in_b = (rng.next_u64() & 1) != 0;
        const Target t = config.lora_targets[static_cast<size_t>(coord.target_index)];
        const int rows = coord.in_b ? config.target_out_dim(t) : config.lora_rank;
        const int cols = coord.in_b ? config.lora_rank : config.target_in_dim(t);
        coord.row = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(rows));
        coord.col = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(cols));

        // The distance is non-differentiable at its zero; skip coordinates
        // whose distance sits at or near the kink.
        if (eval_r(bundle, adapter.modality_tag, probe, modality, layer) <= kGradKinkFloor)
            continue;
        const auto grads = backward_r_layer(bundle, adapter.modality_tag, probe, modality, layer);
        const auto & pair = grads[static_cast<size_t>(coord.target_index)];
        const double an = coord.in_b ? pair.b(coord.row, coord.col) : pair.a(coord.row, coord.col);
        const double fd =
            fd_grad(bundle, adapter.modality_tag, probe, modality, layer, coord, kStep);
        const double err = std::abs(fd - an) / std::max(std::abs(an) + std::abs(fd), 1e-8);
        rep.max_rel_err = std::max(rep.max_rel_err, err);
        ++rep.checked;
    }
    if (rep.checked < samples)
        throw std::runtime_error("grad_spot_check: too few coordinates away from the kink");
    return rep;
}

int cmd_export_heatmap(const RunConfig & rc) {
    require_out(rc);
    const auto coeffs_path = resolved_coeffs_path(rc, kFusedCoeffsFile);
    const TensorFile file = read_tensor_file(coeffs_path);
    if (file.extra.value("kind", "") != "coeffs")
        throw std::runtime_error(coeffs_path.string() + " is not a coefficient container");
    FusedCoefficients fc;
    if (file.extra.value("granularity", "") == "fused")
        fc = fused_coeffs_from_file(file);
    else
        fc = coeffs_from_element_only(element_coeffs_from_file(file));
    const ModelConfig config = config_from_json(file.extra.at("config"));

    json provenance{{"command", "export-heatmap"},
                    {"inputs", json::array({input_entry(coeffs_path)})}};
    std::string out = csv_comment(provenance);
    out += "model,layer,target,matrix,row,col,value\n";
    for (size_t mi = 0; mi < fc.model_tags.size(); ++mi) {
        const LoraTensors & lt = fc.lambda[mi];
        for (int l = 0; l < lt.n_layers(); ++l) {
            for (size_t ti = 0; ti < lt.layers[static_cast<size_t>(l)].size(); ++ti) {
                const auto & pair = lt.layers[static_cast<size_t>(l)][ti];
                const std::string row_prefix = fc.model_tags[mi] + "," + std::to_string(l + 1) +
                                               "," + target_name(config.lora_targets[ti]) + ",";
                for (Eigen::Index r = 0; r < pair.a.rows(); ++r)
                    for (Eigen::Index c = 0; c < pair.a.cols(); ++c)
                        out += row_prefix + "A," + std::to_string(r) + "," + std::to_string(c) +
                               "," + format_g17(pair.a(r, c)) + "\n";
                for (Eigen::Index r = 0; r < pair.b.rows(); ++r)
                    for (Eigen::Index c = 0; c < pair.b.cols(); ++c)
                        out += row_prefix + "B," + std::to_string(r) + "," + std::to_string(c) +
                               "," + format_g17(pair.b(r, c)) + "\n";
            }
        }
    }
    std::filesystem::create_directories(rc.out);
    const auto path = rc.out / kHeatmapFile;
    write_text(path, out);
    note_written(path);
    return kExitOk;
}

} // namespace esmerge
