#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "condigsum/corpus.hpp"
#include "condigsum/model.hpp"

namespace testutil {

inline condigsum::DialogueRecord dialogue(const std::string& id,
                                          const std::vector<std::string>& texts,
                                          const std::string& summary = "a talks .") {
  condigsum::DialogueRecord d;
  d.id = id;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    d.utterances.push_back({i % 2 == 0 ? "ann" : "bob", texts[i]});
  }
  d.summary = summary;
  return d;
}

inline condigsum::ModelConfig tiny_config(std::size_t vocab_size) {
  condigsum::ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_dim = 12;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.max_positions = 64;
  c.dropout = 0.0;
  return c;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("condigsum-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
