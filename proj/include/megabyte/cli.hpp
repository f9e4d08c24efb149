#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "megabyte/checkpoint.hpp"
#include "megabyte/costmodel.hpp"
#include "megabyte/data.hpp"
#include "megabyte/inference.hpp"
#include "megabyte/model.hpp"
#include "megabyte/run_config.hpp"
#include "megabyte/training.hpp"

namespace megabyte::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

namespace detail {

inline std::string read_text(const std::filesystem::path& path) {
  const ByteSequence b = read_file_bytes(path);
  return std::string(b.begin(), b.end());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// "1024", "512,1024,4096", "1024:8192" (doubling) or "64:256:64" (step).
inline std::vector<std::uint64_t> parse_lengths(const std::string& text) {
  auto num = [&](const std::string& s) {
    const std::uint64_t v = parse_size(s);
    if (v == 0) throw ConfigError("sequence length must be >= 1 in '" + text + "'");
    return v;
  };
  std::vector<std::uint64_t> out;
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() < 2 || parts.size() > 3) throw ConfigError("malformed --seq-len-range '" + text + "'");
    const std::uint64_t lo = num(parts[0]), hi = num(parts[1]);
    if (lo > hi) throw ConfigError("empty --seq-len-range '" + text + "'");
    if (parts.size() == 2) {
      for (std::uint64_t T = lo; T <= hi; T *= 2) out.push_back(T);
    } else {
      const std::uint64_t step = num(parts[2]);
      for (std::uint64_t T = lo; T <= hi; T += step) out.push_back(T);
    }
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  if (out.empty()) throw ConfigError("empty --seq-len-range");
  return out;
}

inline int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out_path,
                     std::string loss_csv, std::optional<std::uint64_t> seed, std::ostream& out) {
  RunConfig rc = parse_run_config(read_text(config_path));
  if (seed) rc.train.seed = *seed;
  const auto docs = load_corpus(data_path);
  MegabyteModel model(rc.model, init_weights(rc.model, rc.train.seed, rc.train.init_std));
  const std::size_t report_every = std::max<std::size_t>(1, rc.train.total_updates / 10);
  const TrainResult result = train(model, docs, rc.train, [&](const LossRecord& r) {
    if (r.step % report_every == 0 || r.step + 1 == rc.train.total_updates) {
      out << "step " << r.step << "  lr " << r.lr << "  loss " << r.loss_bits << " bits/byte\n";
    }
  });
  save_checkpoint(out_path, rc, model.parameters());
  if (loss_csv.empty()) loss_csv = out_path + ".loss.csv";
  write_text(loss_csv, loss_curve_csv(result.curve));
  out << "wrote " << out_path << " and " << loss_csv << "\n";
  return kExitOk;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& mode_name,
                    const std::string& csv_path, std::ostream& out) {
  const EvalMode mode = parse_eval_mode(mode_name);
  Checkpoint ck = load_checkpoint(ckpt_path);
  const auto docs = load_corpus(data_path);
  MegabyteModel model(ck.config.model, std::move(ck.params));
  const EvalReport report = evaluate_bpb(ModelScorer(model), docs, mode);
  std::size_t words = 0;
  for (const auto& d : docs) words += count_words(d.bytes);
  char line[128];
  std::snprintf(line, sizeof line, "%.6f", report.bpb);
  out << "mode: " << to_string(mode) << "\n";
  out << "bpb: " << line << "\n";
  out << "cost: " << report.cost_multiplier << "X\n";
  out << "bytes: " << report.total_bytes << "\n";
  if (words > 0) {
    std::snprintf(line, sizeof line, "%.4f", bpb_to_word_ppl(report.bpb, report.total_bytes, words));
    out << "words: " << words << "\nword_ppl: " << line << "\n";
  }
  out << "position_in_patch mean_bits\n";
  for (std::size_t p = 0; p < report.per_position_bits.size(); ++p) {
    std::snprintf(line, sizeof line, "%zu %.6f\n", p, report.per_position_bits[p]);
    out << line;
  }
  if (!csv_path.empty()) write_text(csv_path, eval_report_csv(report));
  return kExitOk;
}

inline int cmd_generate(const std::string& ckpt_path, const std::string& prompt_path, std::size_t length,
                        double temperature, std::uint64_t seed, const std::string& out_path, std::string trace_path,
                        std::ostream& out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  MegabyteModel model(ck.config.model, std::move(ck.params));
  const ByteSequence prompt = prompt_path.empty() ? ByteSequence{} : read_file_bytes(prompt_path);
  const GenTrace trace = generate(model, prompt, length, temperature, seed);
  write_file_bytes(out_path, trace.bytes);
  if (trace_path.empty()) trace_path = out_path + ".trace.csv";
  std::string csv = "index,byte,log_prob,serial_steps\n";
  for (std::size_t i = 0; i < trace.bytes.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof line, "%zu,%u,%.17g,%zu\n", i, static_cast<unsigned>(trace.bytes[i]),
                  trace.log_probs[i], trace.serial_steps[i]);
    csv += line;
  }
  write_text(trace_path, csv);
  out << "generated " << trace.bytes.size() << " bytes, " << trace.total_serial_steps << " serial steps\n";
  return kExitOk;
}

struct CostOptions {
  std::string arch = "megabyte";
  std::string m, m_global, m_local, dim = "0", seq_lens = "1024";
  std::uint64_t patch_size = 8, global_layers = 0, local_layers = 0, layers = 0;
  std::string csv_path;
  bool reference_sizes = false;
  bool masked = false;
};

inline int cmd_cost(const CostOptions& o, std::ostream& out) {
  const auto lengths = parse_lengths(o.seq_lens);
  std::vector<ArchSpec> grid;
  if (o.reference_sizes) {
    for (const auto& c : reference_size_pairs()) {
      grid.push_back(c.megabyte);
      grid.push_back(c.transformer);
    }
  } else {
    const ArchKind kind = parse_arch(o.arch);
    auto need = [](const std::string& v, const char* flag) {
      if (v.empty()) throw ConfigError(std::string("missing ") + flag);
      return parse_size(v);
    };
    if (kind == ArchKind::kMegabyte) {
      grid.push_back(ArchSpec::megabyte(need(o.m_global, "--m-global"), need(o.m_local, "--m-local"), o.patch_size,
                                        o.global_layers, o.local_layers));
    } else if (kind == ArchKind::kTransformer) {
      grid.push_back(ArchSpec::transformer(need(o.m, "--m"), o.layers));
    } else {
      grid.push_back(ArchSpec::linear_transformer(need(o.m, "--m"), parse_size(o.dim), o.layers));
    }
  }
  const std::string csv = sweep_to_csv(sweep(grid, lengths, o.masked));
  if (o.csv_path.empty()) {
    out << csv;
  } else {
    write_text(o.csv_path, csv);
    out << "wrote " << o.csv_path << "\n";
  }
  return kExitOk;
}

struct ScanOptions {
  std::string ppm, mode = "raster", out, in;
  std::size_t patch_size = 0, width = 0, height = 0;
  bool inverse = false;
};

inline int cmd_scan(const ScanOptions& o, std::ostream& out) {
  if (o.mode != "raster" && o.mode != "patch") throw ConfigError("--mode must be raster or patch");
  if (o.mode == "patch") patch_side(o.patch_size);
  if (o.inverse) {
    if (o.in.empty() || o.width == 0 || o.height == 0) throw ConfigError("--inverse needs --in, --width and --height");
    const ByteSequence bytes = read_file_bytes(o.in);
    const ImageGrid img = o.mode == "raster" ? raster_unscan(bytes, o.height, o.width)
                                             : patch_unscan(bytes, o.height, o.width, o.patch_size);
    write_file_bytes(o.out, write_ppm(img));
    out << "wrote " << o.out << " (" << img.width << "x" << img.height << ")\n";
    return kExitOk;
  }
  if (o.ppm.empty()) throw ConfigError("--ppm is required");
  const ImageGrid img = parse_ppm(read_file_bytes(o.ppm));
  const ByteSequence bytes = o.mode == "raster" ? raster_scan(img) : patch_scan(img, o.patch_size);
  write_file_bytes(o.out, bytes);
  out << "wrote " << bytes.size() << " bytes to " << o.out << "\n";
  return kExitOk;
}

}  // namespace detail

// Entry point for the `megabyte` tool; `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"MEGABYTE multiscale byte-level decoder", "megabyte"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, loss_csv;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_cmd->add_option("--config", config_path, "key=value run config")->required();
  train_cmd->add_option("--data", data_path, "corpus file or directory")->required();
  train_cmd->add_option("--out", out_path, "checkpoint path")->required();
  train_cmd->add_option("--loss-csv", loss_csv, "loss curve CSV (default <out>.loss.csv)");
  train_cmd->add_option("--seed", seed, "override the config seed");

  std::string ckpt_path, mode = "basic", csv_path;
  auto* eval_cmd = app.add_subcommand("eval", "bits per byte on a corpus");
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "corpus file or directory")->required();
  eval_cmd->add_option("--mode", mode, "basic, sliding, strided or sliding+strided");
  eval_cmd->add_option("--csv", csv_path, "write the report as CSV");

  std::string prompt_path, trace_path;
  std::size_t length = 0;
  double temperature = 0.0;
  std::uint64_t gen_seed = 1;
  auto* gen_cmd = app.add_subcommand("generate", "sample bytes from a checkpoint");
  gen_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  gen_cmd->add_option("--prompt-file", prompt_path, "prompt bytes");
  gen_cmd->add_option("--length", length, "bytes to generate")->required();
  gen_cmd->add_option("--temperature", temperature, "0 for greedy");
  gen_cmd->add_option("--seed", gen_seed, "sampling seed");
  gen_cmd->add_option("--out", out_path, "generated bytes")->required();
  gen_cmd->add_option("--trace", trace_path, "trace CSV (default <out>.trace.csv)");

  detail::CostOptions cost;
  auto* cost_cmd = app.add_subcommand("cost", "analytic FLOPs, attention and serial-step costs");
  cost_cmd->add_option("--arch", cost.arch, "transformer, linear_transformer or megabyte");
  cost_cmd->add_option("--m", cost.m, "transformer non-embedding parameters (e.g. 660M)");
  cost_cmd->add_option("--m-global", cost.m_global, "global-model parameters");
  cost_cmd->add_option("--m-local", cost.m_local, "local-model parameters");
  cost_cmd->add_option("--dim", cost.dim, "embedding dimension (linear attention term)");
  cost_cmd->add_option("--patch-size", cost.patch_size, "patch size");
  cost_cmd->add_option("--global-layers", cost.global_layers, "global layers");
  cost_cmd->add_option("--local-layers", cost.local_layers, "local layers");
  cost_cmd->add_option("--layers", cost.layers, "transformer layers");
  cost_cmd->add_option("--seq-len-range", cost.seq_lens, "T values: 1024 | 512,1024 | 1024:8192 | 64:256:64");
  cost_cmd->add_option("--csv", cost.csv_path, "write CSV here instead of stdout");
  cost_cmd->add_flag("--reference-sizes", cost.reference_sizes, "sweep the three reference size pairs");
  cost_cmd->add_flag("--masked", cost.masked, "halve attention counts for causal masking");

  detail::ScanOptions scan;
  auto* scan_cmd = app.add_subcommand("scan", "convert between PPM images and byte sequences");
  scan_cmd->add_option("--ppm", scan.ppm, "input PPM (P6)");
  scan_cmd->add_option("--mode", scan.mode, "raster or patch");
  scan_cmd->add_option("--patch-size", scan.patch_size, "P = 3p^2 for patch mode");
  scan_cmd->add_option("--out", scan.out, "output path")->required();
  scan_cmd->add_flag("--inverse", scan.inverse, "bytes back to a PPM");
  scan_cmd->add_option("--in", scan.in, "byte file for --inverse");
  scan_cmd->add_option("--width", scan.width, "image width for --inverse");
  scan_cmd->add_option("--height", scan.height, "image height for --inverse");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train_cmd) return detail::cmd_train(config_path, data_path, out_path, loss_csv, seed, out);
    if (*eval_cmd) return detail::cmd_eval(ckpt_path, data_path, mode, csv_path, out);
    if (*gen_cmd) {
      return detail::cmd_generate(ckpt_path, prompt_path, length, temperature, gen_seed, out_path, trace_path, out);
    }
    if (*cost_cmd) return detail::cmd_cost(cost, out);
    if (*scan_cmd) return detail::cmd_scan(scan, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace megabyte::cli
