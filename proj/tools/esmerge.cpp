// SPDX-License-Identifier: Apache-2.0

#include "esmerge/pipeline.hpp"

#include "CLI11.hpp"

#include <exception>
#include <iostream>
#include <string>

int main(int argc, char ** argv) {
    CLI::App app{"embedding-space LoRA merging toolkit"};
    app.require_subcommand(1);

    esmerge::RunConfig rc;
    std::string out, bundle, coeffs;

    auto add_common = [&](CLI::App * cmd) {
        cmd->add_option("--seed", rc.seed, "master seed (default 0)");
        cmd->add_option("--out", out, "output directory")->required();
    };

    CLI::App * gen = app.add_subcommand("gen-toy", "generate the toy bundle with one adapter per modality");
    add_common(gen);
    gen->add_option("--models,--modalities", rc.n_models, "modality adapter count (default 3)");
    gen->add_option("--subspace-dim", rc.subspace_dim, "dimensions per modality subspace (default 6)");
    gen->add_option("--d-model", rc.model.d_model, "model width (default 32)");
    gen->add_option("--n-layers", rc.model.n_layers, "decoder blocks (default 4)");
    gen->add_option("--n-heads", rc.model.n_heads, "attention heads (default 4)");
    gen->add_option("--d-ff", rc.model.d_ff, "FFN hidden width (default 64)");
    gen->add_option("--lora-rank", rc.model.lora_rank, "low-rank dimension (default 2)");
    gen->add_option("--lora-alpha", rc.model.lora_alpha, "LoRA scaling numerator (default 8)");

    CLI::App * co = app.add_subcommand("coeffs", "compute merging coefficients from probe signals");
    add_common(co);
    co->add_option("--bundle", bundle, "input bundle (default OUT/bundle.esmg)");
    co->add_option("--k", rc.k, "probes per batch (default 32)");
    co->add_option("--tokens-per-block", rc.tokens_per_block, "modality tokens per probe (default 8)");
    co->add_option("--prefix-tokens", rc.prefix_tokens, "text prefix tokens per block (default 2)");
    co->add_option("--projections", rc.projections, "SWD projection count (default 256; 1024 = full-scale)");
    co->add_option("--p", rc.p, "SWD distance order (default 2.0)");
    co->add_option("--tau", rc.tau, "softmax temperature (default 0.5)");
    co->add_option("--mode", rc.mode, "layer | element | fused (default fused)");
    co->add_option("--check-grads", rc.check_grads,
                   "spot-check N analytic gradients against finite differences (default off)");

    CLI::App * mg = app.add_subcommand("merge", "merge the bundle's adapters");
    add_common(mg);
    mg->add_option("--bundle", bundle, "input bundle (default OUT/bundle.esmg)");
    mg->add_option("--coeffs", coeffs, "coefficient file or directory (default OUT)");
    mg->add_option("--method", rc.method, "es | es-layer | es-element | avg | ties (default es)");
    mg->add_option("--trim", rc.trim, "TIES keep fraction in (0,1] (default 0.2)");

    CLI::App * hm = app.add_subcommand("export-heatmap", "export coefficients as long-format CSV");
    add_common(hm);
    hm->add_option("--coeffs", coeffs, "coefficient file or directory (default OUT/fused_coeffs.esmg)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        if (e.get_exit_code() == 0)
            return app.exit(e);
        app.exit(e);
        return esmerge::kExitUsage;
    }

    rc.out = out;
    rc.bundle_path = bundle;
    rc.coeffs_dir = coeffs;

    try {
        if (gen->parsed())
            return esmerge::cmd_gen_toy(rc);
        if (co->parsed())
            return esmerge::cmd_coeffs(rc);
        if (mg->parsed())
            return esmerge::cmd_merge(rc);
        if (hm->parsed())
            return esmerge::cmd_export_heatmap(rc);
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return esmerge::kExitUsage;
    }
    return esmerge::kExitUsage;
}
