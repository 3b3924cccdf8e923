#pragma once

// Byte-level tokenizer and training/evaluation batch streams.
//
// Byte b maps to id b. Documents (separated by blank lines) are wrapped in
// BOS/EOS; the separator bytes themselves are kept, so dropping the special
// ids restores the input exactly.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bitskip/model.hpp"

namespace bitskip {

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr Index kByteVocab = 259;

struct Corpus {
  std::vector<std::int32_t> ids;
  Index vocab_size = kByteVocab;
  std::string source;
  std::size_t byte_count = 0;
};

Corpus tokenize(std::string_view bytes, std::string source = {});
// Throws RangeError for ids outside the vocabulary.
std::string detokenize(std::span<const std::int32_t> ids);

// Reads a file and tokenizes it; IoError when unreadable.
Corpus load_corpus(const std::filesystem::path& path);

// Splits off the trailing `fraction` of tokens (held-out evaluation text).
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double holdout_fraction);

struct Batch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;  // [batch·seq], kPad where nothing is predicted

  // Rows [first, first+count) as their own batch.
  Batch slice(Index first, Index count) const;
};

// Seeded random contiguous windows of seq+1 tokens; targets are the inputs
// shifted by one. The windows of a step depend only on (seed, step), so a
// stream can be resumed at any step.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, Index batch, Index seq, std::uint64_t seed);

  Batch at(std::uint64_t step) const;
  Batch next() { return at(step_++); }
  std::uint64_t position() const { return step_; }
  void seek(std::uint64_t step) { step_ = step; }

 private:
  const Corpus* corpus_;
  Index batch_;
  Index seq_;
  std::uint64_t seed_;
  std::uint64_t step_ = 0;
};

// Non-overlapping windows of `seq` inputs covering every predictable
// position once; the final partial window is padded with kPad.
std::vector<Batch> sequential_windows(std::span<const std::int32_t> ids, Index seq, Index windows_per_batch);

// Engine seeded from (seed, step, stream); independent streams per purpose.
std::mt19937_64 step_engine(std::uint64_t seed, std::uint64_t step, std::uint64_t stream);

}  // namespace bitskip
