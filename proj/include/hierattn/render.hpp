#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hierattn/relevancy.hpp"
#include "hierattn/sample.hpp"

namespace hierattn {

// Display label for a token id ("w17"); the synthetic corpus has no surface forms.
std::string token_label(std::size_t id);

// Scores divided by their maximum; all zeros when the maximum is zero.
std::vector<double> normalized_by_max(const std::vector<double>& scores);

// Token heat strip: one <rect class="token-bg"> and one <text class="token"> per token,
// background intensity proportional to score / max(score).
std::string render_token_strip(const std::vector<std::size_t>& tokens, const std::vector<double>& scores);

// Patch overlay: one <rect class="patch"> per grid cell, filled with the patch energy
// in grayscale and opacity proportional to score / max(score).
std::string render_patch_overlay(const Tensor& patches, const PatchGrid& grid, const std::vector<double>& scores);

// Sentence scores as bars, lowest on the left and highest on the right.
std::string render_sentence_bars(const std::vector<double>& sentence_scores);

// Writes speech.svg plus sentence_<j>_tokens.svg / sentence_<j>_patches.svg for every
// selected sentence. Returns the written paths.
std::vector<std::filesystem::path> render_heatmap(const InterpretationResult& result, const SpeechSample& sample,
                                                  const std::filesystem::path& out_dir);

}  // namespace hierattn
