#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "hierattn/corpus.hpp"
#include "hierattn/experiment.hpp"
#include "hierattn/model.hpp"
#include "hierattn/relevancy.hpp"
#include "hierattn/render.hpp"
#include "hierattn/train.hpp"

namespace fs = std::filesystem;
using namespace hierattn;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) apply_seed(cfg, *g.seed);
  return cfg;
}

fs::path corpus_dir(const Globals& g) { return fs::path(g.out) / "corpus"; }
fs::path checkpoint_dir(const Globals& g, Architecture arch) {
  return fs::path(g.out) / "checkpoints" / to_string(arch);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void print_metrics(const std::string& name, const EvalReport& r) {
  std::cout << name << " precision=" << r.precision << " recall=" << r.recall << " f1=" << r.f1 << " (tp=" << r.tp
            << " fp=" << r.fp << " tn=" << r.tn << " fn=" << r.fn << ")\n";
}

int cmd_gen(const Globals& g) {
  const ExperimentConfig cfg = resolve_config(g);
  const Corpus corpus = generate_corpus(cfg.corpus);
  save_corpus(corpus, corpus_dir(g));
  std::cout << "wrote " << corpus.train.size() << " train and " << corpus.test.size() << " test speeches to "
            << corpus_dir(g).string() << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& arch_name) {
  const ExperimentConfig cfg = resolve_config(g);
  const Architecture arch = architecture_from_string(arch_name);
  const Corpus corpus = load_corpus(corpus_dir(g));
  const fs::path dir = checkpoint_dir(g, arch);
  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl");
  TrainHistory history;
  const HierModel model = train_model(arch, corpus.train, corpus.config, cfg, &history,
                                      [&](const LogRecord& r) { log << to_jsonl(r) << '\n'; });
  save_checkpoint(model, dir);
  for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
    std::cout << "epoch " << e + 1 << " loss " << history.epoch_loss[e] << "\n";
  }
  std::cout << "checkpoint " << checkpoint_id(model) << " saved to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::string& arch_name) {
  const ExperimentConfig cfg = resolve_config(g);
  const Architecture arch = architecture_from_string(arch_name);
  const Corpus corpus = load_corpus(corpus_dir(g));
  const HierModel model = load_checkpoint(checkpoint_dir(g, arch));
  const EvalReport report = evaluate_model(model, corpus.test, cfg.train.max_sentences);
  nlohmann::json j = report;
  j["checkpoint_id"] = checkpoint_id(model);
  write_json(fs::path(g.out) / ("eval_" + to_string(arch) + ".json"), j);
  print_metrics(to_string(arch), report);
  return 0;
}

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

// A participant id from either split, or a bare number indexing the test split.
const SpeechSample& find_sample(const Corpus& corpus, const std::string& id) {
  for (const auto* split : {&corpus.test, &corpus.train}) {
    for (const auto& s : *split) {
      if (s.participant_id == id) return s;
    }
  }
  if (all_digits(id)) {
    const std::size_t i = std::stoul(id);
    if (i < corpus.test.size()) return corpus.test[i];
  }
  throw std::runtime_error("no sample with id " + id);
}

int cmd_interpret(const Globals& g, const std::string& sample_id, std::size_t top_k) {
  const ExperimentConfig cfg = resolve_config(g);
  const Corpus corpus = load_corpus(corpus_dir(g));
  const HierModel model = load_checkpoint(checkpoint_dir(g, Architecture::Proposed));
  const SpeechSample sample = truncated(find_sample(corpus, sample_id), cfg.train.max_sentences);
  const InterpretationResult result = hierarchical_interpret(model, sample, top_k);
  const fs::path dir = fs::path(g.out) / "interpret" / sample.participant_id;
  write_json(dir / "interpretation.json", result);
  const auto files = render_heatmap(result, sample, dir);
  std::cout << "sample " << sample.participant_id << " p(depressed)=" << result.class_probs.at(1) << " top sentences:";
  for (const auto& s : result.selected) std::cout << ' ' << s.index;
  std::cout << "\nwrote " << (dir / "interpretation.json").string() << " and " << files.size() << " svg files\n";
  return 0;
}

int cmd_compare(const Globals& g) {
  const ExperimentConfig cfg = resolve_config(g);
  const Corpus corpus = generate_corpus(cfg.corpus);
  const CompareReport report = run_compare(corpus, cfg);
  nlohmann::json j = report;
  j["config"] = cfg;
  write_json(fs::path(g.out) / "compare_report.json", j);
  print_metrics("proposed", report.proposed);
  print_metrics("baseline", report.baseline);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical bi-modal attention classifier with relevancy interpretation"};
  app.fallthrough();
  app.require_subcommand(1);

  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for corpus, model init and training order");
  app.add_option("--config", g.config, "JSON config with optional corpus/model/train sections")
      ->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Workspace directory")->capture_default_str();

  auto* gen = app.add_subcommand("gen", "Generate the synthetic corpus into <out>/corpus");
  auto* train = app.add_subcommand("train", "Train a model on <out>/corpus");
  std::string arch = "proposed";
  train->add_option("--arch", arch, "proposed or baseline")
      ->check(CLI::IsMember({"proposed", "baseline"}))
      ->capture_default_str();
  auto* eval = app.add_subcommand("eval", "Evaluate a trained checkpoint on the test split");
  eval->add_option("--arch", arch, "proposed or baseline")
      ->check(CLI::IsMember({"proposed", "baseline"}))
      ->capture_default_str();
  auto* interpret = app.add_subcommand("interpret", "Explain one speech with the proposed model");
  std::string sample_id;
  std::size_t top_k = 2;
  interpret->add_option("--sample-id", sample_id, "Participant id, or an index into the test split")->required();
  interpret->add_option("--top-k", top_k, "Sentences to explain")->check(CLI::PositiveNumber)->capture_default_str();
  auto* compare = app.add_subcommand("compare", "Train and evaluate both architectures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen) return cmd_gen(g);
    if (*train) return cmd_train(g, arch);
    if (*eval) return cmd_eval(g, arch);
    if (*interpret) return cmd_interpret(g, sample_id, top_k);
    if (*compare) return cmd_compare(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
