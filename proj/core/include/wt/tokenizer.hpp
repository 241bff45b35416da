#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wt {

struct TokenizerSpecials {
  int32_t pad = 0;
  int32_t bos = 1;
  int32_t eos = 2;
  int32_t unk = 3;
};

inline constexpr int32_t kNumSpecials = 4;

// Unigram language-model tokenizer. Pieces are byte strings over whole UTF-8
// codepoints; ids [0,4) are reserved for the specials, pieces follow.
struct TokenizerModel {
  std::vector<std::string> pieces;  // id = index + kNumSpecials
  std::vector<double> log_probs;    // parallel to pieces, <= 0 and finite
  TokenizerSpecials specials;

  int32_t vocab_size() const { return kNumSpecials + static_cast<int32_t>(pieces.size()); }

  // Fallback score for a single unknown codepoint, strictly below every
  // real piece so it never wins a tie.
  double unk_log_prob() const;

  int32_t piece_id(std::string_view piece) const;  // -1 when absent

  static TokenizerModel from_pieces(const std::vector<std::pair<std::string, double>>& pieces);

  void rebuild_index();

 private:
  struct StringHash {
    using is_transparent = void;
    size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
  };
  struct StringEq {
    using is_transparent = void;
    bool operator()(std::string_view a, std::string_view b) const { return a == b; }
  };
  std::unordered_map<std::string, int32_t, StringHash, StringEq> index_;
};

struct UnigramTrainConfig {
  int32_t target_vocab = 4096;   // total ids including the specials
  int32_t rounds = 8;            // EM+prune cycles
  int32_t em_iters_per_round = 2;
  int32_t max_piece_len = 8;     // codepoints
  int64_t min_piece_count = 2;   // seed-frequency floor for multi-char pieces
  double prune_fraction = 0.2;
  int64_t max_seed_pieces = 1'000'000;
};

struct UnigramTrainResult {
  TokenizerModel model;
  // Corpus log-likelihood after every EM iteration, grouped by round; each
  // round's sequence is non-decreasing.
  std::vector<std::vector<double>> round_log_likelihoods;
};

UnigramTrainResult train_unigram(const std::vector<std::string>& corpus,
                                 const UnigramTrainConfig& cfg);

// Max-log-probability segmentation (Viterbi). Ties break to fewer tokens,
// then to the lexicographically smallest piece-string sequence. Codepoints
// not covered by any piece map to unk.
std::vector<int32_t> encode(const TokenizerModel& model, std::string_view text);

std::string decode(const TokenizerModel& model, std::span<const int32_t> ids);

// Exhaustive-segmentation oracle; refuses texts longer than 14 codepoints.
std::vector<int32_t> brute_force_encode(const TokenizerModel& model, std::string_view text);

void save_tokenizer(const TokenizerModel& model, const std::string& path);
TokenizerModel load_tokenizer(const std::string& path);

// Splits UTF-8 text into codepoint spans (offset, byte length).
std::vector<std::pair<int32_t, int32_t>> utf8_codepoints(std::string_view text);

inline constexpr std::string_view kUnkPlaceholder = "\xEF\xBF\xBD";  // U+FFFD

}  // namespace wt
