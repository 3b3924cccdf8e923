#include "bitskip/corpus.hpp"

#include <fstream>
#include <iterator>

namespace bitskip {

namespace {

bool is_newline(char c) { return c == '\n' || c == '\r'; }

}  // namespace

Corpus tokenize(std::string_view bytes, std::string source) {
  Corpus corpus;
  corpus.source = std::move(source);
  corpus.byte_count = bytes.size();
  if (bytes.empty()) return corpus;
  corpus.ids.reserve(bytes.size() + bytes.size() / 64 + 2);

  bool in_document = false;
  std::size_t i = 0;
  while (i < bytes.size()) {
    if (is_newline(bytes[i])) {
      // A run of newline bytes with two or more '\n' separates documents.
      std::size_t j = i;
      int line_feeds = 0;
      while (j < bytes.size() && is_newline(bytes[j])) {
        if (bytes[j] == '\n') ++line_feeds;
        ++j;
      }
      if (line_feeds >= 2 && in_document) {
        corpus.ids.push_back(kEos);
        in_document = false;
      }
      for (std::size_t k = i; k < j; ++k) corpus.ids.push_back(static_cast<unsigned char>(bytes[k]));
      i = j;
      continue;
    }
    if (!in_document) {
      corpus.ids.push_back(kBos);
      in_document = true;
    }
    corpus.ids.push_back(static_cast<unsigned char>(bytes[i]));
    ++i;
  }
  if (in_document) corpus.ids.push_back(kEos);
  return corpus;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0 || id >= kByteVocab) {
      throw RangeError("detokenize: id " + std::to_string(id) + " outside the byte vocabulary");
    }
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return tokenize(bytes, path.string());
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double holdout_fraction) {
  if (holdout_fraction <= 0.0 || holdout_fraction >= 1.0) {
    throw RangeError("holdout fraction must lie in (0, 1)");
  }
  const auto n = corpus.ids.size();
  const auto cut = static_cast<std::size_t>(static_cast<double>(n) * (1.0 - holdout_fraction));
  Corpus head = corpus;
  Corpus tail = corpus;
  head.ids.assign(corpus.ids.begin(), corpus.ids.begin() + static_cast<std::ptrdiff_t>(cut));
  tail.ids.assign(corpus.ids.begin() + static_cast<std::ptrdiff_t>(cut), corpus.ids.end());
  return {std::move(head), std::move(tail)};
}

Batch Batch::slice(Index first, Index count) const {
  if (first < 0 || count < 1 || first + count > inputs.batch) throw RangeError("batch slice out of range");
  Batch out;
  out.inputs.batch = count;
  out.inputs.seq = inputs.seq;
  const auto begin = static_cast<std::ptrdiff_t>(first * inputs.seq);
  const auto end = static_cast<std::ptrdiff_t>((first + count) * inputs.seq);
  out.inputs.ids.assign(inputs.ids.begin() + begin, inputs.ids.begin() + end);
  out.targets.assign(targets.begin() + begin, targets.begin() + end);
  return out;
}

std::mt19937_64 step_engine(std::uint64_t seed, std::uint64_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

BatchStream::BatchStream(const Corpus& corpus, Index batch, Index seq, std::uint64_t seed)
    : corpus_(&corpus), batch_(batch), seq_(seq), seed_(seed) {
  if (batch < 1 || seq < 1) throw RangeError("batch and sequence length must be positive");
  if (static_cast<Index>(corpus.ids.size()) < batch * (seq + 1)) {
    throw RangeError("corpus of " + std::to_string(corpus.ids.size()) + " tokens is too small for " +
                     std::to_string(batch) + " windows of " + std::to_string(seq + 1));
  }
}

Batch BatchStream::at(std::uint64_t step) const {
  auto rng = step_engine(seed_, step, 1);
  const auto& ids = corpus_->ids;
  const auto span = static_cast<std::uint64_t>(ids.size()) - static_cast<std::uint64_t>(seq_);
  Batch out;
  out.inputs.batch = batch_;
  out.inputs.seq = seq_;
  out.inputs.ids.reserve(static_cast<std::size_t>(batch_ * seq_));
  out.targets.reserve(static_cast<std::size_t>(batch_ * seq_));
  for (Index b = 0; b < batch_; ++b) {
    const auto offset = static_cast<std::size_t>(rng() % span);
    for (Index t = 0; t < seq_; ++t) {
      out.inputs.ids.push_back(ids[offset + static_cast<std::size_t>(t)]);
      out.targets.push_back(ids[offset + static_cast<std::size_t>(t) + 1]);
    }
  }
  return out;
}

std::vector<Batch> sequential_windows(std::span<const std::int32_t> ids, Index seq, Index windows_per_batch) {
  if (seq < 1 || windows_per_batch < 1) throw RangeError("window length and batch size must be positive");
  if (ids.size() < 2) throw RangeError("evaluation needs at least two tokens");
  const auto predicted = static_cast<Index>(ids.size()) - 1;
  const Index windows = (predicted + seq - 1) / seq;
  std::vector<Batch> batches;
  for (Index first = 0; first < windows; first += windows_per_batch) {
    const Index count = std::min(windows_per_batch, windows - first);
    Batch b;
    b.inputs.batch = count;
    b.inputs.seq = seq;
    for (Index w = first; w < first + count; ++w) {
      for (Index t = 0; t < seq; ++t) {
        const Index pos = w * seq + t;
        if (pos < predicted) {
          b.inputs.ids.push_back(ids[static_cast<std::size_t>(pos)]);
          b.targets.push_back(ids[static_cast<std::size_t>(pos + 1)]);
        } else {
          b.inputs.ids.push_back(kPad);
          b.targets.push_back(kPad);
        }
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace bitskip
