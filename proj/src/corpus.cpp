#include "hierattn/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <random>
#include <sstream>

#include "hierattn/errors.hpp"

namespace hierattn {

std::string to_string(EvidenceModality m) {
  switch (m) {
    case EvidenceModality::Both: return "both";
    case EvidenceModality::TextOnly: return "text";
    case EvidenceModality::AudioOnly: return "audio";
  }
  return "?";
}

namespace {

EvidenceModality modality_from_string(const std::string& s) {
  if (s == "both") return EvidenceModality::Both;
  if (s == "text") return EvidenceModality::TextOnly;
  if (s == "audio") return EvidenceModality::AudioOnly;
  throw std::invalid_argument("unknown evidence modality '" + s + "' (expected both|text|audio)");
}

}  // namespace

void CorpusConfig::validate() const {
  if (n_train == 0 || n_test == 0) throw std::invalid_argument("corpus split sizes must be positive");
  if (min_sentences == 0 || min_sentences > max_sentences) throw std::invalid_argument("invalid sentence range");
  if (min_tokens == 0 || min_tokens > max_tokens) throw std::invalid_argument("invalid token range");
  if (evidence_vocab == 0 || evidence_vocab >= vocab_size) {
    throw std::invalid_argument("vocabulary of " + std::to_string(vocab_size) + " too small for " +
                                std::to_string(evidence_vocab) + " reserved evidence tokens");
  }
  if (!(signal_fraction > 0.0 && signal_fraction <= 1.0)) throw std::invalid_argument("signal_fraction must lie in (0,1]");
  if (patch_grid.count() == 0 || patch_dim == 0) throw std::invalid_argument("patch grid must be non-empty");
  if (evidence_patches > patch_grid.count()) throw std::invalid_argument("more evidence patches than grid cells");
  if (evidence_tokens == 0 && modality != EvidenceModality::AudioOnly) {
    throw std::invalid_argument("text evidence requires evidence_tokens > 0");
  }
  if (evidence_patches == 0 && modality != EvidenceModality::TextOnly) {
    throw std::invalid_argument("audio evidence requires evidence_patches > 0");
  }
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = nlohmann::json{{"n_train", c.n_train},
                     {"n_test", c.n_test},
                     {"min_sentences", c.min_sentences},
                     {"max_sentences", c.max_sentences},
                     {"vocab_size", c.vocab_size},
                     {"evidence_vocab", c.evidence_vocab},
                     {"min_tokens", c.min_tokens},
                     {"max_tokens", c.max_tokens},
                     {"patch_grid", {{"rows", c.patch_grid.rows}, {"cols", c.patch_grid.cols}}},
                     {"patch_dim", c.patch_dim},
                     {"signal_fraction", c.signal_fraction},
                     {"signal_strength", c.signal_strength},
                     {"evidence_tokens", c.evidence_tokens},
                     {"evidence_patches", c.evidence_patches},
                     {"modality", to_string(c.modality)},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  c.n_train = j.value("n_train", c.n_train);
  c.n_test = j.value("n_test", c.n_test);
  c.min_sentences = j.value("min_sentences", c.min_sentences);
  c.max_sentences = j.value("max_sentences", c.max_sentences);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.evidence_vocab = j.value("evidence_vocab", c.evidence_vocab);
  c.min_tokens = j.value("min_tokens", c.min_tokens);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  if (j.contains("patch_grid")) {
    c.patch_grid.rows = j["patch_grid"].value("rows", c.patch_grid.rows);
    c.patch_grid.cols = j["patch_grid"].value("cols", c.patch_grid.cols);
  }
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.signal_fraction = j.value("signal_fraction", c.signal_fraction);
  c.signal_strength = j.value("signal_strength", c.signal_strength);
  c.evidence_tokens = j.value("evidence_tokens", c.evidence_tokens);
  c.evidence_patches = j.value("evidence_patches", c.evidence_patches);
  if (j.contains("modality")) c.modality = modality_from_string(j["modality"].get<std::string>());
  c.seed = j.value("seed", c.seed);
}

bool SampleEvidence::is_evidence_sentence(std::size_t j) const { return find(j) != nullptr; }

const SentenceEvidence* SampleEvidence::find(std::size_t j) const {
  for (const auto& s : sentences)
    if (s.sentence == j) return &s;
  return nullptr;
}

namespace {

constexpr std::int64_t kSentenceMs = 4900;

std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

SentencePair background_sentence(const CorpusConfig& c, std::size_t index, std::mt19937_64& rng) {
  SentencePair s;
  s.index = index;
  s.start_ms = static_cast<std::int64_t>(index) * kSentenceMs;
  s.end_ms = *s.start_ms + kSentenceMs;
  std::uniform_int_distribution<std::size_t> n_tok(c.min_tokens, c.max_tokens);
  std::uniform_int_distribution<std::size_t> tok(0, c.vocab_size - c.evidence_vocab - 1);
  s.tokens.resize(n_tok(rng));
  for (auto& t : s.tokens) t = tok(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  s.audio_patches = Tensor({c.patch_grid.count(), c.patch_dim});
  for (double& v : s.audio_patches.data()) v = noise(rng);
  return s;
}

SentenceEvidence plant_evidence(const CorpusConfig& c, SentencePair& s, std::mt19937_64& rng) {
  SentenceEvidence ev;
  ev.sentence = s.index;
  if (c.modality != EvidenceModality::AudioOnly) {
    std::uniform_int_distribution<std::size_t> tok(c.vocab_size - c.evidence_vocab, c.vocab_size - 1);
    ev.token_positions = choose_distinct(s.tokens.size(), std::min(c.evidence_tokens, s.tokens.size()), rng);
    for (auto p : ev.token_positions) s.tokens[p] = tok(rng);
  }
  if (c.modality != EvidenceModality::TextOnly) {
    ev.patch_indices = choose_distinct(c.patch_grid.count(), c.evidence_patches, rng);
    for (auto p : ev.patch_indices)
      for (double& v : s.audio_patches.row(p)) v += c.signal_strength;
  }
  return ev;
}

void generate_split(const CorpusConfig& c, std::size_t n, const std::string& prefix, std::mt19937_64& rng,
                    std::vector<SpeechSample>& out, std::vector<SampleEvidence>& key) {
  std::vector<int> labels(n, kNormal);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n / 2), kDepressed);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::uniform_int_distribution<std::size_t> n_sent(c.min_sentences, c.max_sentences);
  for (std::size_t i = 0; i < n; ++i) {
    std::ostringstream id;
    id << prefix << '-' << std::setw(4) << std::setfill('0') << i;
    SpeechSample sample{id.str(), labels[i], c.patch_grid, {}};
    const std::size_t count = n_sent(rng);
    for (std::size_t j = 0; j < count; ++j) sample.sentences.push_back(background_sentence(c, j, rng));

    SampleEvidence ev;
    if (sample.label == kDepressed) {
      const auto k = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(c.signal_fraction * static_cast<double>(count))), 1, count);
      for (auto j : choose_distinct(count, k, rng)) ev.sentences.push_back(plant_evidence(c, sample.sentences[j], rng));
    }
    out.push_back(std::move(sample));
    key.push_back(std::move(ev));
  }
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  std::mt19937_64 rng(config.seed);
  generate_split(config, config.n_train, "train", rng, corpus.train, corpus.train_key);
  generate_split(config, config.n_test, "test", rng, corpus.test, corpus.test_key);
  return corpus;
}

std::vector<LabeledSegment> segment_labeled_view(const std::vector<SpeechSample>& samples) {
  std::vector<LabeledSegment> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const auto& s : samples[i].sentences) out.push_back({&s, samples[i].label, i});
  return out;
}

// ---- sample files -------------------------------------------------------------

namespace {

constexpr const char* kSampleFormat = "hierattn-sample";

std::size_t position(std::istream& in) {
  const auto p = in.tellg();
  return p < 0 ? 0 : static_cast<std::size_t>(p);
}

nlohmann::json read_json_line(std::istream& in, const char* what) {
  const std::size_t at = position(in);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(std::string("missing ") + what, at);
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed ") + what + ": " + e.what(), at + (e.byte > 0 ? e.byte - 1 : 0));
  }
}

}  // namespace

void save_sample(std::ostream& out, const SpeechSample& sample, std::size_t vocab_size) {
  nlohmann::json header{{"format", kSampleFormat},
                        {"version", 1},
                        {"participant_id", sample.participant_id},
                        {"label", sample.label},
                        {"n_sentences", sample.sentences.size()},
                        {"patch_grid", {{"rows", sample.grid.rows}, {"cols", sample.grid.cols}}},
                        {"vocab_size", vocab_size}};
  out << header.dump() << '\n';
  for (const auto& s : sample.sentences) {
    nlohmann::json line{{"index", s.index}, {"tokens", s.tokens}};
    if (s.start_ms) line["start_ms"] = *s.start_ms;
    if (s.end_ms) line["end_ms"] = *s.end_ms;
    out << line.dump() << '\n';
    write_tensor(out, s.audio_patches);
  }
}

void save_sample(const std::filesystem::path& path, const SpeechSample& sample, std::size_t vocab_size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  save_sample(out, sample, vocab_size);
}

SpeechSample load_sample(std::istream& in) {
  const nlohmann::json header = read_json_line(in, "sample header");
  if (!header.is_object() || header.value("format", "") != kSampleFormat) {
    throw ParseError("not a sample file (bad header)", 0);
  }
  SpeechSample sample;
  std::size_t n = 0, vocab = 0;
  try {
    sample.participant_id = header.at("participant_id").get<std::string>();
    sample.label = header.at("label").get<int>();
    n = header.at("n_sentences").get<std::size_t>();
    sample.grid.rows = header.at("patch_grid").at("rows").get<std::size_t>();
    sample.grid.cols = header.at("patch_grid").at("cols").get<std::size_t>();
    vocab = header.at("vocab_size").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("sample header: ") + e.what(), 0);
  }
  if (sample.label != kNormal && sample.label != kDepressed) throw ParseError("label must be 0 or 1", 0);
  if (n == 0) throw ParseError("sample declares no sentences", 0);

  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t at = position(in);
    const nlohmann::json line = read_json_line(in, "sentence header");
    SentencePair s;
    try {
      s.index = line.at("index").get<std::size_t>();
      s.tokens = line.at("tokens").get<std::vector<std::size_t>>();
      if (line.contains("start_ms")) s.start_ms = line["start_ms"].get<std::int64_t>();
      if (line.contains("end_ms")) s.end_ms = line["end_ms"].get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("sentence header: ") + e.what(), at);
    }
    if (s.tokens.empty()) throw ParseError("sentence " + std::to_string(j) + " has no tokens", at);
    for (auto t : s.tokens) {
      if (t >= vocab) throw ParseError("token id " + std::to_string(t) + " outside vocabulary", at);
    }
    const std::size_t tensor_at = position(in);
    s.audio_patches = read_tensor(in);
    if (s.audio_patches.rank() != 2 || s.audio_patches.rows() != sample.grid.count()) {
      throw ParseError("patch tensor " + shape_string(s.audio_patches.shape()) + " does not match declared grid " +
                       std::to_string(sample.grid.rows) + "x" + std::to_string(sample.grid.cols), tensor_at);
    }
    sample.sentences.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing data after last sentence", position(in));
  return sample;
}

SpeechSample load_external(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return load_sample(in);
}

// ---- corpus directories ---------------------------------------------------------

namespace {

nlohmann::json key_to_json(const std::vector<SampleEvidence>& key) {
  auto arr = nlohmann::json::array();
  for (const auto& ev : key) {
    auto sents = nlohmann::json::array();
    for (const auto& s : ev.sentences) {
      sents.push_back({{"sentence", s.sentence}, {"token_positions", s.token_positions}, {"patch_indices", s.patch_indices}});
    }
    arr.push_back(sents);
  }
  return arr;
}

std::vector<SampleEvidence> key_from_json(const nlohmann::json& arr) {
  std::vector<SampleEvidence> key;
  for (const auto& sents : arr) {
    SampleEvidence ev;
    for (const auto& s : sents) {
      ev.sentences.push_back({s.at("sentence").get<std::size_t>(), s.at("token_positions").get<std::vector<std::size_t>>(),
                              s.at("patch_indices").get<std::vector<std::size_t>>()});
    }
    key.push_back(std::move(ev));
  }
  return key;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  nlohmann::json index{{"config", corpus.config},
                       {"train", nlohmann::json::array()},
                       {"test", nlohmann::json::array()},
                       {"train_key", key_to_json(corpus.train_key)},
                       {"test_key", key_to_json(corpus.test_key)}};
  for (const auto& s : corpus.train) {
    const auto rel = fs::path("train") / (s.participant_id + ".sample");
    save_sample(dir / rel, s, corpus.config.vocab_size);
    index["train"].push_back(rel.generic_string());
  }
  for (const auto& s : corpus.test) {
    const auto rel = fs::path("test") / (s.participant_id + ".sample");
    save_sample(dir / rel, s, corpus.config.vocab_size);
    index["test"].push_back(rel.generic_string());
  }
  std::ofstream out(dir / "corpus.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "corpus.json").string());
  out << index.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "corpus.json").string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("corpus.json: ") + e.what(), e.byte);
  }
  Corpus corpus;
  corpus.config = index.at("config").get<CorpusConfig>();
  for (const auto& rel : index.at("train")) corpus.train.push_back(load_external(dir / rel.get<std::string>()));
  for (const auto& rel : index.at("test")) corpus.test.push_back(load_external(dir / rel.get<std::string>()));
  corpus.train_key = key_from_json(index.at("train_key"));
  corpus.test_key = key_from_json(index.at("test_key"));
  if (corpus.train_key.size() != corpus.train.size() || corpus.test_key.size() != corpus.test.size()) {
    throw ParseError("corpus.json: evidence key does not match sample lists", 0);
  }
  return corpus;
}

}  // namespace hierattn
