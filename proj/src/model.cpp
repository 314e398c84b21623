#include "hierattn/model.hpp"

#include <fstream>
#include <sstream>

#include "hierattn/errors.hpp"

namespace hierattn {

std::string to_string(Architecture arch) { return arch == Architecture::Proposed ? "proposed" : "baseline"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "proposed") return Architecture::Proposed;
  if (s == "baseline") return Architecture::Baseline;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected proposed|baseline)");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_ff == 0) throw std::invalid_argument("model sizes must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (vocab_size == 0 || patch_dim == 0 || max_tokens == 0 || max_patches == 0 || max_sentences == 0) {
    throw std::invalid_argument("model capacities must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"audio_layers", c.audio_layers},
                     {"text_layers", c.text_layers},
                     {"fusion_blocks", c.fusion_blocks},
                     {"speech_layers", c.speech_layers},
                     {"vocab_size", c.vocab_size},
                     {"patch_dim", c.patch_dim},
                     {"max_tokens", c.max_tokens},
                     {"max_patches", c.max_patches},
                     {"max_sentences", c.max_sentences},
                     {"dropout", c.dropout},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("arch")) c.arch = architecture_from_string(j.at("arch").get<std::string>());
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.audio_layers = j.value("audio_layers", c.audio_layers);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.fusion_blocks = j.value("fusion_blocks", c.fusion_blocks);
  c.speech_layers = j.value("speech_layers", c.speech_layers);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.max_patches = j.value("max_patches", c.max_patches);
  c.max_sentences = j.value("max_sentences", c.max_sentences);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
}

std::size_t traces_per_sentence(const ModelConfig& cfg) {
  return cfg.audio_layers + cfg.text_layers + 2 * cfg.fusion_blocks;
}

HierModel::HierModel(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  build(rng);
}

void HierModel::build(std::mt19937_64& rng) {
  const std::size_t d = cfg_.d_model;
  patch_proj_w_ = &store_.add("audio.patch_proj.w", init::xavier_uniform(cfg_.patch_dim, d, rng));
  patch_proj_b_ = &store_.add("audio.patch_proj.b", Tensor({1, d}));
  audio_cls_ = &store_.add("audio.cls", init::normal(1, d, 0.1, rng));
  audio_pos_ = &store_.add("audio.pos", init::normal(cfg_.max_patches + 1, d, 0.1, rng));
  for (std::size_t l = 0; l < cfg_.audio_layers; ++l) {
    audio_enc_.push_back(make_encoder_block(store_, "audio.enc" + std::to_string(l), d, cfg_.n_heads, cfg_.d_ff, rng));
  }

  token_embed_ = &store_.add("text.embed", init::normal(cfg_.vocab_size, d, 1.0, rng));
  text_cls_ = &store_.add("text.cls", init::normal(1, d, 0.1, rng));
  text_pos_ = &store_.add("text.pos", init::normal(cfg_.max_tokens + 1, d, 0.1, rng));
  for (std::size_t l = 0; l < cfg_.text_layers; ++l) {
    text_enc_.push_back(make_encoder_block(store_, "text.enc" + std::to_string(l), d, cfg_.n_heads, cfg_.d_ff, rng));
  }

  for (std::size_t b = 0; b < cfg_.fusion_blocks; ++b) {
    fusion_.push_back(make_decoder_block(store_, "fusion.block" + std::to_string(b), d, cfg_.n_heads, cfg_.d_ff, rng));
  }

  if (cfg_.arch == Architecture::Proposed) {
    speech_cls_ = &store_.add("speech.cls", init::normal(1, d, 0.1, rng));
    speech_pos_ = &store_.add("speech.pos", init::normal(cfg_.max_sentences + 1, d, 0.1, rng));
    for (std::size_t l = 0; l < cfg_.speech_layers; ++l) {
      speech_.push_back(make_encoder_block(store_, "speech.enc" + std::to_string(l), d, cfg_.n_heads, cfg_.d_ff, rng));
    }
  }

  head_w_ = &store_.add("head.w", init::xavier_uniform(d, 2, rng));
  head_b_ = &store_.add("head.b", Tensor({1, 2}));
}

void HierModel::validate(const SentencePair& s) const {
  const Tensor& a = s.audio_patches;
  if (a.rank() != 2 || a.rows() == 0) throw DimensionError("sentence has no audio patches");
  if (a.cols() != cfg_.patch_dim) {
    throw DimensionError("patch width " + std::to_string(a.cols()) + " != model patch_dim " +
                         std::to_string(cfg_.patch_dim));
  }
  if (a.rows() > cfg_.max_patches) throw CapacityError("too many audio patches: " + std::to_string(a.rows()));
  if (s.tokens.empty()) throw DimensionError("sentence has no text tokens");
  if (s.tokens.size() > cfg_.max_tokens) throw CapacityError("too many tokens: " + std::to_string(s.tokens.size()));
  for (auto t : s.tokens) {
    if (t >= cfg_.vocab_size) throw DimensionError("token id " + std::to_string(t) + " outside vocabulary");
  }
}

void HierModel::validate(const SpeechSample& sample) const {
  if (sample.sentences.empty()) throw DimensionError("speech sample without sentences");
  if (sample.sentences.size() > cfg_.max_sentences) {
    throw CapacityError("speech has " + std::to_string(sample.sentences.size()) + " sentences, limit " +
                        std::to_string(cfg_.max_sentences));
  }
  for (const auto& s : sample.sentences) validate(s);
}

SentenceStates HierModel::encode_sentence(const ForwardContext& ctx, const SentencePair& s) const {
  validate(s);
  Tape& tape = ctx.tape;
  const int sentence = ctx.traces ? ctx.traces->sentence : -1;

  Var patches = tape.constant(s.audio_patches);
  Var projected = add_row(matmul(patches, tape.parameter(*patch_proj_w_)), tape.parameter(*patch_proj_b_));
  const Var audio_parts[] = {tape.parameter(*audio_cls_), projected};
  Var audio = add_positional_embeddings(concat_rows(audio_parts), tape.parameter(*audio_pos_));
  for (std::size_t l = 0; l < audio_enc_.size(); ++l) {
    audio = encoder_block_forward(ctx, audio, audio_enc_[l], {LayerKind::AudioSelf, static_cast<int>(l), sentence});
  }

  Var embedded = gather_rows(tape.parameter(*token_embed_), s.tokens);
  const Var text_parts[] = {tape.parameter(*text_cls_), embedded};
  Var text = add_positional_embeddings(concat_rows(text_parts), tape.parameter(*text_pos_));
  for (std::size_t l = 0; l < text_enc_.size(); ++l) {
    text = encoder_block_forward(ctx, text, text_enc_[l], {LayerKind::TextSelf, static_cast<int>(l), sentence});
  }
  return {audio, text};
}

Var HierModel::fuse_cross_modal(const ForwardContext& ctx, const SentenceStates& states) const {
  Var h = states.text;
  const int offset = static_cast<int>(text_enc_.size());
  for (std::size_t b = 0; b < fusion_.size(); ++b) {
    h = decoder_fusion_block_forward(ctx, h, states.audio, fusion_[b], offset + static_cast<int>(b),
                                     static_cast<int>(b));
  }
  return slice_rows(h, 0, 1);
}

Var HierModel::sentence_embedding(const ForwardContext& ctx, const SentencePair& s) const {
  return fuse_cross_modal(ctx, encode_sentence(ctx, s));
}

Var HierModel::classify(const ForwardContext& ctx, Var representation) const {
  return add_row(matmul(representation, ctx.tape.parameter(*head_w_)), ctx.tape.parameter(*head_b_));
}

Var HierModel::speech_forward(const ForwardContext& ctx, std::span<const Var> embeddings) const {
  if (cfg_.arch != Architecture::Proposed) throw ContractError("baseline model has no speech-level block");
  if (embeddings.empty()) throw DimensionError("speech_forward: no sentence embeddings");
  if (embeddings.size() > cfg_.max_sentences) {
    throw CapacityError("speech_forward: " + std::to_string(embeddings.size()) + " sentences exceed " +
                        std::to_string(cfg_.max_sentences));
  }
  Tape& tape = ctx.tape;
  std::vector<Var> rows;
  rows.reserve(embeddings.size() + 1);
  rows.push_back(tape.parameter(*speech_cls_));
  rows.insert(rows.end(), embeddings.begin(), embeddings.end());
  Var x = add_positional_embeddings(concat_rows(rows), tape.parameter(*speech_pos_));
  if (ctx.traces) ctx.traces->sentence = -1;
  for (std::size_t l = 0; l < speech_.size(); ++l) {
    x = encoder_block_forward(ctx, x, speech_[l], {LayerKind::SpeechSelf, static_cast<int>(l), -1});
  }
  return classify(ctx, slice_rows(x, 0, 1));
}

Var HierModel::proposed_forward(const ForwardContext& ctx, const SpeechSample& sample) const {
  validate(sample);
  std::vector<Var> embeddings;
  embeddings.reserve(sample.sentences.size());
  for (std::size_t j = 0; j < sample.sentences.size(); ++j) {
    if (ctx.traces) ctx.traces->sentence = static_cast<int>(j);
    embeddings.push_back(sentence_embedding(ctx, sample.sentences[j]));
  }
  return speech_forward(ctx, embeddings);
}

Var HierModel::baseline_forward(const ForwardContext& ctx, const SentencePair& s) const {
  return classify(ctx, sentence_embedding(ctx, s));
}

void HierModel::copy_parameters_from(const HierModel& other) {
  if (other.store_.size() != store_.size()) throw ContractError("copy_parameters_from: structure mismatch");
  for (std::size_t i = 0; i < store_.size(); ++i) {
    if (store_[i].name != other.store_[i].name || store_[i].value.shape() != other.store_[i].value.shape()) {
      throw ContractError("copy_parameters_from: parameter " + store_[i].name + " differs");
    }
    store_[i].value = other.store_[i].value;
  }
}

int predict(const Tensor& logits) {
  if (logits.size() != 2) throw DimensionError("predict expects two logits");
  return logits[1] > logits[0] ? kDepressed : kNormal;
}

std::vector<double> class_probabilities(const Tensor& logits) {
  const Tensor p = softmax_rows(logits.reshaped({1, logits.size()}));
  return {p.data().begin(), p.data().end()};
}

int majority_vote(std::span<const int> sentence_preds, std::size_t threshold_count) {
  if (sentence_preds.empty()) throw std::invalid_argument("majority_vote: no predictions");
  std::size_t positives = 0;
  for (int p : sentence_preds) positives += p == kDepressed ? 1 : 0;
  return positives > threshold_count ? kDepressed : kNormal;
}

int majority_vote(std::span<const int> sentence_preds) {
  return majority_vote(sentence_preds, sentence_preds.size() / 2);
}

// ---- checkpoints --------------------------------------------------------------

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kPayloadName = "params.bin";
constexpr const char* kFormat = "hierattn-checkpoint";

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string payload_bytes(const HierModel& model) {
  std::ostringstream os(std::ios::binary);
  for (const auto& p : model.params()) write_tensor(os, p.value);
  return os.str();
}

}  // namespace

std::string checkpoint_id(const HierModel& model) {
  const nlohmann::json cfg = model.config();
  return fnv1a_hex(cfg.dump() + payload_bytes(model));
}

void save_checkpoint(const HierModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = 1;
  manifest["config"] = model.config();
  manifest["payload"] = kPayloadName;
  manifest["id"] = checkpoint_id(model);
  auto& entries = manifest["parameters"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    const std::size_t bytes = serialized_size(p.value);
    entries.push_back({{"name", p.name}, {"shape", p.value.shape().to_vector()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  {
    std::ofstream out(dir / kPayloadName, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / kPayloadName).string());
    for (const auto& p : model.params()) write_tensor(out, p.value);
  }
  std::ofstream out(dir / kManifestName);
  if (!out) throw std::runtime_error("cannot write " + (dir / kManifestName).string());
  out << manifest.dump(2) << '\n';
}

HierModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream min(dir / kManifestName);
  if (!min) throw std::runtime_error("cannot open " + (dir / kManifestName).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(min);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what(), e.byte);
  }
  if (manifest.value("format", "") != kFormat) throw ParseError("not a checkpoint manifest", 0);

  HierModel model(manifest.at("config").get<ModelConfig>());
  std::ifstream pin(dir / manifest.value("payload", std::string(kPayloadName)), std::ios::binary);
  if (!pin) throw std::runtime_error("cannot open checkpoint payload in " + dir.string());

  const auto& entries = manifest.at("parameters");
  if (entries.size() != model.params().size()) {
    throw ParseError("checkpoint lists " + std::to_string(entries.size()) + " parameters, model expects " +
                     std::to_string(model.params().size()), 0);
  }
  for (const auto& e : entries) {
    const auto name = e.at("name").get<std::string>();
    Parameter* p = model.params().find(name);
    if (!p) throw ParseError("unknown parameter " + name, 0);
    const auto offset = e.at("offset").get<std::size_t>();
    pin.seekg(static_cast<std::streamoff>(offset));
    Tensor t = read_tensor(pin);
    if (t.shape() != p->value.shape()) {
      throw ParseError("parameter " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                       shape_string(p->value.shape()), offset);
    }
    p->value = std::move(t);
  }
  return model;
}

}  // namespace hierattn
