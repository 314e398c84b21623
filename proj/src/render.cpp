#include "hierattn/render.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "hierattn/errors.hpp"

namespace hierattn {

namespace {

constexpr double kMinAlpha = 0.1;  // used when every score is zero

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

std::string svg_open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
}

std::string warning(double y) {
  return "  <text class=\"warning\" x=\"4\" y=\"" + num(y) +
         "\" font-size=\"11\" fill=\"#b00\">all relevancy scores are zero</text>\n";
}

}  // namespace

std::string token_label(std::size_t id) { return "w" + std::to_string(id); }

std::vector<double> normalized_by_max(const std::vector<double>& scores) {
  const double mx = scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size(), 0.0);
  if (mx > 0.0) {
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = std::max(scores[i], 0.0) / mx;
  }
  return out;
}

std::string render_token_strip(const std::vector<std::size_t>& tokens, const std::vector<double>& scores) {
  if (tokens.size() != scores.size()) throw DimensionError("render_token_strip: one score per token required");
  constexpr double w = 56, h = 28;
  const bool degenerate = all_zero(scores);
  const auto alpha = normalized_by_max(scores);
  std::ostringstream os;
  os << svg_open(w * static_cast<double>(tokens.size()), h + (degenerate ? 16 : 0));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double x = w * static_cast<double>(i);
    const double a = degenerate ? kMinAlpha : alpha[i];
    os << "  <rect class=\"token-bg\" x=\"" << num(x) << "\" y=\"0\" width=\"" << num(w) << "\" height=\"" << num(h)
       << "\" fill=\"#ffc800\" fill-opacity=\"" << num(a) << "\"/>\n";
    os << "  <text class=\"token\" x=\"" << num(x + w / 2) << "\" y=\"" << num(h * 0.65)
       << "\" font-size=\"12\" text-anchor=\"middle\" data-score=\"" << num(scores[i]) << "\">"
       << token_label(tokens[i]) << "</text>\n";
  }
  if (degenerate) os << warning(h + 12);
  os << "</svg>\n";
  return os.str();
}

std::string render_patch_overlay(const Tensor& patches, const PatchGrid& grid, const std::vector<double>& scores) {
  const std::size_t n = grid.count();
  if (patches.rows() != n || scores.size() != n) {
    throw DimensionError("render_patch_overlay: grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                         " does not match patches/scores");
  }
  constexpr double cell = 24;
  std::vector<double> energy(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto row = patches.row(p);
    energy[p] = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
  }
  const auto [lo, hi] = std::minmax_element(energy.begin(), energy.end());
  const double span = *hi - *lo;
  const bool degenerate = all_zero(scores);
  const auto alpha = normalized_by_max(scores);

  // time runs left to right (grid rows), frequency bottom to top (grid cols)
  const double width = cell * static_cast<double>(grid.rows);
  const double height = cell * static_cast<double>(grid.cols);
  std::ostringstream os;
  os << svg_open(width, height + (degenerate ? 16 : 0));
  os << "  <rect class=\"background\" x=\"0\" y=\"0\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" fill=\"#000\"/>\n";
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const std::size_t p = r * grid.cols + c;
      const int gray = span > 0.0 ? static_cast<int>(255.0 * (energy[p] - *lo) / span + 0.5) : 128;
      const double a = degenerate ? kMinAlpha : alpha[p];
      os << "  <rect class=\"patch\" x=\"" << num(cell * static_cast<double>(r)) << "\" y=\""
         << num(cell * static_cast<double>(grid.cols - 1 - c)) << "\" width=\"" << num(cell) << "\" height=\""
         << num(cell) << "\" fill=\"rgb(" << gray << ',' << gray << ',' << gray << ")\" fill-opacity=\"" << num(a)
         << "\" data-score=\"" << num(scores[p]) << "\"/>\n";
    }
  }
  if (degenerate) os << warning(height + 12);
  os << "</svg>\n";
  return os.str();
}

std::string render_sentence_bars(const std::vector<double>& sentence_scores) {
  constexpr double bar = 28, gap = 6, plot_h = 120, label_h = 18;
  std::vector<std::size_t> order(sentence_scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sentence_scores[a] < sentence_scores[b]; });
  const auto heights = normalized_by_max(sentence_scores);
  const double width = (bar + gap) * static_cast<double>(order.size()) + gap;
  std::ostringstream os;
  os << svg_open(width, plot_h + label_h);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t j = order[k];
    const double x = gap + (bar + gap) * static_cast<double>(k);
    const double bh = plot_h * heights[j];
    os << "  <rect class=\"bar\" x=\"" << num(x) << "\" y=\"" << num(plot_h - bh) << "\" width=\"" << num(bar)
       << "\" height=\"" << num(bh) << "\" fill=\"#3a6fb0\" data-sentence=\"" << j << "\" data-score=\""
       << num(sentence_scores[j]) << "\"/>\n";
    os << "  <text class=\"bar-label\" x=\"" << num(x + bar / 2) << "\" y=\"" << num(plot_h + 13)
       << "\" font-size=\"11\" text-anchor=\"middle\">s" << j << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> render_heatmap(const InterpretationResult& result, const SpeechSample& sample,
                                                  const std::filesystem::path& out_dir) {
  if (result.sentence_scores.size() != sample.sentences.size()) {
    throw DimensionError("render_heatmap: result does not belong to this sample");
  }
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    const auto path = out_dir / name;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << svg;
    written.push_back(path);
  };
  emit("speech.svg", render_sentence_bars(result.sentence_scores));
  for (const auto& sel : result.selected) {
    if (sel.index >= sample.sentences.size()) throw std::out_of_range("render_heatmap: selected index out of range");
    const SentencePair& s = sample.sentences[sel.index];
    const std::string stem = "sentence_" + std::to_string(sel.index);
    if (all_zero(sel.token_scores) || all_zero(sel.patch_scores)) {
      std::cerr << "warning: " << stem << " of " << result.sample_id << " has all-zero relevancy scores\n";
    }
    emit(stem + "_tokens.svg", render_token_strip(s.tokens, sel.token_scores));
    emit(stem + "_patches.svg", render_patch_overlay(s.audio_patches, sel.grid, sel.patch_scores));
  }
  return written;
}

}  // namespace hierattn
