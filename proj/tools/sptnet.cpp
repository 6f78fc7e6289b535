#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sptnet/experiment.hpp"
#include "sptnet/io.hpp"
#include "sptnet/metrics.hpp"

namespace {

enum Exit { ok = 0, config_error = 2, numeric_error = 3, io_error = 4 };

// --config FILE, --set key=value and one --<key> flag per schema entry.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "config file (key = value lines)");
    app->add_option("--set", sets, "override as key=value (repeatable)");
    for (const auto& key : sptnet::config_schema()) {
      options[key.key] = app->add_option("--" + key.key, flags[key.key], key.doc + " [" + key.default_value + "]")
                             ->group("Config keys");
    }
  }

  // defaults < base < file < flags
  sptnet::ConfigValues values(const std::optional<sptnet::ConfigValues>& base = std::nullopt) const {
    sptnet::ConfigValues v = base ? *base : sptnet::ConfigValues{};
    if (!file.empty()) v.merge_file(file);
    for (const auto& [key, option] : options)
      if (option->count() > 0) v.set(key, flags.at(key));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw sptnet::ConfigError("--set expects key=value, got '" + s + "'");
      v.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return v;
  }
};

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") std::cout << text;
  else sptnet::write_text(out, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sptnet: border-prompt training and evaluation for category discovery"};
  app.require_subcommand(1);

  auto* split = app.add_subcommand("split", "generate the synthetic dataset and write its split manifest");
  ConfigFlags split_flags;
  split_flags.attach(split);
  std::string split_out = "data";
  split->add_option("-o,--out", split_out, "output directory");

  auto* train = app.add_subcommand("train", "train and write metrics and checkpoints");
  ConfigFlags train_flags;
  train_flags.attach(train);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint directory to continue from");
  bool quiet = false;
  train->add_flag("-q,--quiet", quiet, "no per-epoch progress on stderr");

  auto* eval = app.add_subcommand("eval", "clustering accuracy of a checkpoint or a predictions file");
  std::string eval_ckpt, eval_manifest, eval_preds, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory");
  eval->add_option("--manifest", eval_manifest, "dataset manifest (default: the checkpoint's data)");
  eval->add_option("--predictions", eval_preds, "file with one cluster id per D_u row (needs --manifest)");
  eval->add_option("-o,--out", eval_out, "report file (default stdout)");

  auto* attn = app.add_subcommand("attn", "dump final-layer attention and top-patch masks");
  ConfigFlags attn_flags;
  attn_flags.attach(attn);
  std::string attn_ckpt, attn_out;
  attn->add_option("--checkpoint", attn_ckpt, "checkpoint directory")->required();
  attn->add_option("-o,--out", attn_out, "output file (default stdout)");

  auto* count = app.add_subcommand("count-params", "prompt and model parameter budget");
  ConfigFlags count_flags;
  count_flags.attach(count);

  auto* plot = app.add_subcommand("plot-data", "ACC table from metrics files");
  std::vector<std::string> plot_files;
  std::string plot_out;
  bool all_epochs = false;
  plot->add_option("files", plot_files, "metrics.jsonl files");
  plot->add_flag("--all-epochs", all_epochs, "one row per evaluated epoch instead of the last");
  plot->add_option("-o,--out", plot_out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (split->parsed()) {
      sptnet::cmd_split(split_flags.values(), split_out);
      std::cout << "wrote " << (std::filesystem::path(split_out) / "manifest.txt").string() << '\n';
    } else if (train->parsed()) {
      std::optional<std::filesystem::path> from;
      std::optional<sptnet::ConfigValues> base;
      if (!resume.empty()) {
        from = resume;
        base = sptnet::checkpoint_config(resume);
      }
      const sptnet::ConfigValues values = train_flags.values(base);
      const auto result = sptnet::cmd_train(values, from, quiet ? nullptr : &std::cerr);
      std::cout << "run " << result.run_dir.string() << '\n';
      if (!result.history.epochs.empty() && result.history.epochs.back().evaluated)
        std::cout << sptnet::acc_json(result.history.epochs.back().acc) << '\n';
    } else if (eval->parsed()) {
      sptnet::AccReport report;
      if (!eval_preds.empty()) {
        if (eval_manifest.empty()) throw sptnet::ConfigError("--predictions needs --manifest");
        report = sptnet::eval_predictions(eval_preds, eval_manifest);
      } else {
        if (eval_ckpt.empty()) throw sptnet::ConfigError("eval needs --checkpoint or --predictions");
        std::optional<std::filesystem::path> manifest;
        if (!eval_manifest.empty()) manifest = eval_manifest;
        report = sptnet::cmd_eval(eval_ckpt, manifest);
      }
      emit(sptnet::acc_json(report) + "\n", eval_out);
    } else if (attn->parsed()) {
      const auto config = sptnet::resolve(attn_flags.values(sptnet::checkpoint_config(attn_ckpt)));
      emit(sptnet::cmd_attn(attn_ckpt, config.attn_query, config.attn_top_fraction, config.attn_images) + "\n",
           attn_out);
    } else if (count->parsed()) {
      std::cout << sptnet::cmd_count_params(count_flags.values()).text();
    } else if (plot->parsed()) {
      std::vector<std::filesystem::path> files(plot_files.begin(), plot_files.end());
      const auto table = sptnet::plot_data(files, all_epochs);
      emit(table.csv(), plot_out);
      if (table.skipped_lines > 0) std::cerr << "warning: skipped " << table.skipped_lines << " malformed line(s)\n";
    }
  } catch (const sptnet::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return numeric_error;
  } catch (const sptnet::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io_error;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const std::out_of_range& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  }
  return ok;
}
