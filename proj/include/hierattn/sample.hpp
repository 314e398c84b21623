#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hierattn/tensor.hpp"

namespace hierattn {

// Layout of the audio patch grid: rows along time, cols along frequency.
struct PatchGrid {
  std::size_t rows = 8;
  std::size_t cols = 4;

  std::size_t count() const { return rows * cols; }
  bool operator==(const PatchGrid&) const = default;
};

// One sentence: audio patches [a0×d_patch] (row-major over the patch grid) and text token ids.
struct SentencePair {
  Tensor audio_patches;
  std::vector<std::size_t> tokens;
  std::size_t index = 0;
  std::optional<std::int64_t> start_ms;
  std::optional<std::int64_t> end_ms;

  bool operator==(const SentencePair&) const = default;
};

inline constexpr int kNormal = 0;
inline constexpr int kDepressed = 1;

struct SpeechSample {
  std::string participant_id;
  int label = kNormal;
  PatchGrid grid;
  std::vector<SentencePair> sentences;

  bool operator==(const SpeechSample&) const = default;
};

}  // namespace hierattn
