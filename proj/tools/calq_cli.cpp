// Command-line driver: quantize a manifest, reconstruct or report on an artifact, run the
// embedded self-check, and expose the single/paired transform learners and adaptive rounding.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "calq/calq.hpp"

namespace {

using namespace calq;

struct Shape {
  std::size_t rows = 0, cols = 0;
};

Shape parse_shape(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("shape '" + s + "' must look like ROWSxCOLS");
  try {
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("shape '" + s + "' must look like ROWSxCOLS");
  }
}

// A matrix from an f32 file, or a synthetic heavy-tailed draw when no file is given.
struct MatrixSource {
  std::string file;
  std::string shape;

  DenseMatrix load(Rng& rng, std::size_t default_rows, std::size_t default_cols, double scale) const {
    if (!file.empty()) {
      if (shape.empty()) throw ConfigError("--shape is required with an input file");
      const auto s = parse_shape(shape);
      return read_f32_matrix(file, s.rows, s.cols);
    }
    const auto s = shape.empty() ? Shape{default_rows, default_cols} : parse_shape(shape);
    return heavy_tailed_matrix(s.rows, s.cols, rng, 0.01, scale == 1.0 ? 100.0 : 20.0, scale);
  }
};

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out.precision(10);
  return out;
}

int cmd_quantize(const std::string& manifest_path, const std::string& config_path, const std::string& out_dir,
                 const std::optional<std::string>& method, const std::optional<int>& bits, const std::optional<std::string>& block,
                 const std::optional<std::uint64_t>& seed, const std::optional<int>& threads) {
  const auto manifest = load_manifest(manifest_path);
  PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : config_from_json(read_json_file(config_path));
  if (method) cfg.method = parse_method(*method);
  if (bits) cfg.bits = *bits;
  if (block) {
    if (*block == "none") {
      if (cfg.granularity == GroupKind::subchannel) cfg.granularity = GroupKind::per_channel;
    } else {
      cfg.granularity = GroupKind::subchannel;
      cfg.group_block_size = std::stoul(*block);
    }
  }
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = *threads;
  sync_derived(cfg);
  validate(cfg);

  const auto artifact = quantize_model(manifest, cfg);
  write_artifact(artifact, out_dir);
  write_text_file(std::filesystem::path(out_dir) / "report.csv", report_csv(artifact));
  for (const auto& w : artifact.warnings) std::cerr << "warning: " << w << '\n';
  std::printf("quantized %zu tensors with method %s; mean relative error %.6g; extra FLOPs %.4g%%\n", artifact.tensors.size(),
              to_string(cfg.method), mean_relative_error(artifact), artifact.flops.extra_pct());
  return 0;
}

int cmd_reconstruct(const std::string& artifact_dir, const std::string& out_dir, bool reverse_paired) {
  const auto artifact = read_artifact(artifact_dir);
  const auto tensors = reconstruct_model(artifact, reverse_paired);
  write_reconstruction(artifact, tensors, out_dir);
  std::printf("wrote %zu tensors to %s%s\n", tensors.size(), out_dir.c_str(), reverse_paired ? " (paired tensors reverse-transformed)" : "");
  return 0;
}

int cmd_report(const std::string& artifact_dir, const std::string& csv_path) {
  const auto artifact = read_artifact(artifact_dir);
  const auto csv = report_csv(artifact);
  if (csv_path.empty() || csv_path == "-") {
    std::cout << csv;
  } else {
    write_text_file(csv_path, csv);
  }
  std::printf("%s: %zu tensors, method %s, mean relative error %.6g, extra FLOPs %.4g%%\n", artifact.model_name.c_str(),
              artifact.tensors.size(), to_string(artifact.config.method), mean_relative_error(artifact), artifact.flops.extra_pct());
  return 0;
}

int cmd_selfcheck() {
  const auto rep = run_selfcheck();
  for (const auto& item : rep.items) std::printf("%-20s %s  %s\n", item.name.c_str(), item.passed ? "PASS" : "FAIL", item.detail.c_str());
  std::printf("selfcheck: %s\n", rep.passed() ? "PASS" : "FAIL");
  return rep.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calq: calibration-free weight quantization with learned transforms"};
  app.require_subcommand(1);

  // quantize
  std::string manifest_path, config_path, out_dir;
  std::optional<std::string> method, block;
  std::optional<int> bits, threads;
  std::optional<std::uint64_t> seed;
  auto* quant = app.add_subcommand("quantize", "Quantize every tensor of a manifest into an artifact directory");
  quant->add_option("--manifest", manifest_path, "Tensor manifest (JSON)")->required();
  quant->add_option("--config", config_path, "Pipeline configuration (JSON); defaults when omitted");
  quant->add_option("--out", out_dir, "Artifact directory")->required();
  quant->add_option("--method", method, "uniform | random | cafeq")->check(CLI::IsMember({"uniform", "random", "cafeq"}));
  quant->add_option("--bits", bits, "Bit width 1..8")->check(CLI::Range(1, 8));
  quant->add_option("--block-size", block, "Subchannel group size, or 'none' for per-channel groups");
  quant->add_option("--seed", seed, "Global seed");
  quant->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  // reconstruct
  std::string artifact_dir, recon_out;
  bool reverse_paired = false;
  auto* recon = app.add_subcommand("reconstruct", "Write f32 tensors (and a manifest) decoded from an artifact");
  recon->add_option("--artifact", artifact_dir, "Artifact directory")->required();
  recon->add_option("--out", recon_out, "Output directory")->required();
  recon->add_flag("--reverse-paired", reverse_paired, "Multiply paired tensors back by M^-1 / M");

  // report
  std::string report_dir, csv_path;
  auto* report = app.add_subcommand("report", "Per-tensor errors and FLOP overhead of an artifact");
  report->add_option("--artifact", report_dir, "Artifact directory")->required();
  report->add_option("--csv", csv_path, "CSV output path ('-' for stdout)");

  app.add_subcommand("selfcheck", "Run the embedded sanity checks");

  // learn-single
  MatrixSource single_src;
  std::size_t single_block = 32;
  int single_bits = 4, single_iters = 1000;
  double single_lr = 1e-2, single_tau = 0.0;
  std::uint64_t single_seed = 0;
  std::string single_trace, single_out;
  auto* ls = app.add_subcommand("learn-single", "Learn a block-diagonal transform for one matrix");
  ls->add_option("--input", single_src.file, "f32 matrix file; a synthetic heavy-tailed matrix when omitted");
  ls->add_option("--shape", single_src.shape, "ROWSxCOLS (default 256x256 for synthetic input)");
  ls->add_option("--block-size", single_block, "Transform block size k");
  ls->add_option("--bits", single_bits, "Bit width")->check(CLI::Range(1, 8));
  ls->add_option("--iterations", single_iters, "Adam iterations");
  ls->add_option("--lr", single_lr, "Adam learning rate");
  ls->add_option("--smoothed", single_tau, "Use the smoothed max with this temperature");
  ls->add_option("--seed", single_seed, "Seed");
  ls->add_option("--trace", single_trace, "Loss trace CSV (iteration,block_index,loss)");
  ls->add_option("--out", single_out, "Write the learned blocks as f32");

  // learn-paired
  MatrixSource first_src, second_src;
  std::string paired_loss = "logsumexp", paired_opt = "adam", paired_trace, paired_out;
  double paired_t = 5.0, paired_lr = 1e-2, paired_lambda = 0.1;
  long paired_iters = 2000, paired_every = 100;
  int paired_bits = 4;
  std::uint64_t paired_seed = 0;
  auto* lp = app.add_subcommand("learn-paired", "Learn a dense transform M for a coupled pair (W1 M, M^-1 W2)");
  lp->add_option("--first", first_src.file, "W1 as f32; synthetic when omitted");
  lp->add_option("--first-shape", first_src.shape, "W1 shape ROWSxCOLS (default 256x128)");
  lp->add_option("--second", second_src.file, "W2 as f32; synthetic when omitted");
  lp->add_option("--second-shape", second_src.shape, "W2 shape ROWSxCOLS (default 128x256)");
  lp->add_option("--loss", paired_loss, "logsumexp | sumsq | sumsq_weighted");
  lp->add_option("--t", paired_t, "Log-sum-exp temperature");
  lp->add_option("--optimizer", paired_opt, "adam | cayley")->check(CLI::IsMember({"adam", "cayley"}));
  lp->add_option("--lr", paired_lr, "Learning rate");
  lp->add_option("--lambda", paired_lambda, "Orthonormality penalty weight (Adam only)");
  lp->add_option("--iterations", paired_iters, "Iterations");
  lp->add_option("--checkpoint-every", paired_every, "PQE checkpoint cadence");
  lp->add_option("--bits", paired_bits, "Bit width of the tracked quantizer")->check(CLI::Range(1, 8));
  lp->add_option("--seed", paired_seed, "Seed");
  lp->add_option("--trace", paired_trace, "Trace CSV (iteration,pseudo_loss,relative_pqe,orth_penalty,min_sigma,max_sigma)");
  lp->add_option("--out", paired_out, "Write M as f32");

  // adaptive-round
  MatrixSource ar_first, ar_second;
  int ar_iters = 3, ar_bits = 4;
  std::uint64_t ar_seed = 0;
  std::string ar_trace;
  auto* ar = app.add_subcommand("adaptive-round", "Pseudoinverse-compensated rounding of a coupled pair");
  ar->add_option("--first", ar_first.file, "W1 as f32; synthetic when omitted");
  ar->add_option("--first-shape", ar_first.shape, "W1 shape (default 16x8)");
  ar->add_option("--second", ar_second.file, "W2 as f32; synthetic when omitted");
  ar->add_option("--second-shape", ar_second.shape, "W2 shape (default 8x16)");
  ar->add_option("--iterations", ar_iters, "Iterations (0 = half iteration)")->check(CLI::NonNegativeNumber);
  ar->add_option("--bits", ar_bits, "Bit width")->check(CLI::Range(1, 8));
  ar->add_option("--seed", ar_seed, "Seed for synthetic inputs");
  ar->add_option("--trace", ar_trace, "PQE trace CSV (step,side,pqe)");

  // synthesize
  std::string synth_out;
  std::uint64_t synth_seed = 0;
  SyntheticModelOptions synth;
  auto* sy = app.add_subcommand("synthesize", "Write a small synthetic transformer-shaped model and its manifest");
  sy->add_option("--out", synth_out, "Output directory")->required();
  sy->add_option("--layers", synth.layers, "Number of layers");
  sy->add_option("--d-model", synth.d_model, "Model width");
  sy->add_option("--d-ff", synth.d_ff, "Feed-forward width");
  sy->add_option("--d-head", synth.d_head, "Value/output projection inner width");
  sy->add_flag("!--no-embedding", synth.with_embedding, "Leave out the embedding table");
  sy->add_option("--seed", synth_seed, "Seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*quant) return cmd_quantize(manifest_path, config_path, out_dir, method, bits, block, seed, threads);
    if (*recon) return cmd_reconstruct(artifact_dir, recon_out, reverse_paired);
    if (*report) return cmd_report(report_dir, csv_path);
    if (app.got_subcommand("selfcheck")) return cmd_selfcheck();
    if (*sy) {
      const auto m = write_synthetic_model(synth_out, synth, Seed{synth_seed});
      std::printf("wrote %zu tensors and manifest.json to %s\n", m.tensors.size(), synth_out.c_str());
      return 0;
    }

    if (*ls) {
      Rng rng(Seed{single_seed});
      const auto w = single_src.load(rng, 256, 256, 1.0);
      SingleLossConfig cfg;
      cfg.bits = single_bits;
      cfg.iterations = single_iters;
      cfg.adam.lr = single_lr;
      if (single_tau > 0.0) {
        cfg.inf_norm = InfNormMode::smoothed;
        cfg.tau = single_tau;
      }
      const auto res = optimize_single(w, single_block, cfg, derive_seed(Seed{single_seed}, "single"), !single_trace.empty());
      QuantConfig q;
      q.bits = single_bits;
      q.granularity = Granularity::per_channel(Axis::rows);
      const double plain = relative_error(w, quantize_dequantize(w, q));
      const double learned = relative_error(w, reconstruct(quantize_with_transform(w, res.transform, q)));
      std::printf("surrogate loss %.6g -> %.6g\nrelative error: uniform %.6g, learned %.6g\n", res.initial_loss, res.best_loss, plain, learned);
      if (!single_trace.empty()) {
        auto out = open_csv(single_trace);
        out << "iteration,block_index,loss\n";
        for (const auto& p : res.trace) out << p.iteration << ',' << p.block_index << ',' << p.loss << '\n';
      }
      if (!single_out.empty()) {
        std::vector<double> flat;
        for (const auto& b : res.transform.blocks()) flat.insert(flat.end(), b.data().begin(), b.data().end());
        write_bytes(single_out, encode_f32(flat));
      }
      return 0;
    }

    if (*lp) {
      Rng rng(Seed{paired_seed});
      const auto w1 = first_src.load(rng, 256, 128, 0.02);
      const auto w2 = second_src.load(rng, 128, 256, 0.02);
      PairedOptConfig cfg;
      cfg.optimizer = paired_opt == "cayley" ? PairedOptimizer::cayley : PairedOptimizer::adam;
      cfg.lr = paired_lr;
      cfg.lambda_orth = paired_lambda;
      cfg.iterations = paired_iters;
      cfg.checkpoint_every = paired_every;
      cfg.track = PairQuantConfig::per_channel(paired_bits);
      PairedLossKind kind{parse_paired_loss(paired_loss), paired_t};
      const auto res = optimize_paired(w1, w2, cfg, kind, derive_seed(Seed{paired_seed}, "paired"));
      const auto& t = res.transform;
      std::printf("relative PQE: identity %.6g, best %.6g at iteration %ld\nsingular values of M in [%.6g, %.6g]\n",
                  res.trace.front().relative_pqe, t.relative_pqe, t.best_iteration, t.min_sigma, t.max_sigma);
      for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      if (!paired_trace.empty()) {
        auto out = open_csv(paired_trace);
        out << "iteration,pseudo_loss,relative_pqe,orth_penalty,min_sigma,max_sigma\n";
        for (const auto& p : res.trace)
          out << p.iteration << ',' << p.pseudo_loss << ',' << p.relative_pqe << ',' << p.orth_penalty << ',' << p.min_sigma << ','
              << p.max_sigma << '\n';
      }
      if (!paired_out.empty()) write_f32_matrix(paired_out, t.m);
      return 0;
    }

    if (*ar) {
      Rng rng(Seed{ar_seed});
      const auto w1 = ar_first.load(rng, 16, 8, 1.0);
      const auto w2 = ar_second.load(rng, 8, 16, 1.0);
      AdaptiveRoundConfig cfg;
      cfg.iterations = ar_iters;
      cfg.quant = PairQuantConfig::per_channel(ar_bits);
      const auto res = adaptive_round(w1, w2, cfg);
      const double norm = frobenius(matmul(w1, w2));
      std::printf("PQE: independent %.6g, adaptive %.6g (relative %.6g -> %.6g) after %d iterations\n", res.independent_pqe, res.best_pqe,
                  res.independent_pqe / norm, res.best_pqe / norm, res.iterations_completed);
      if (!res.note.empty()) std::printf("note: %s\n", res.note.c_str());
      if (!ar_trace.empty()) {
        auto out = open_csv(ar_trace);
        out << "step,side,pqe\n";
        for (const auto& p : res.trace) out << p.step << ',' << to_string(p.side) << ',' << p.pqe << '\n';
      }
      return 0;
    }
  } catch (const calq::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
