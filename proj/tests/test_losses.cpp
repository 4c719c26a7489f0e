#include <doctest.h>

#include <cmath>

#include "condigsum/error.hpp"
#include "condigsum/losses.hpp"
#include "helpers.hpp"

using namespace condigsum;

namespace {

constexpr TokenId kBos = Vocabulary::kBos;
constexpr TokenId kEos = Vocabulary::kEos;

// Recomputes the teacher-forced NLL from the model's raw logits with a
// long-double log-sum-exp.
double nll_oracle(Transformer<double>& m, const TokenSeq& src, const TokenSeq& tgt) {
  Tape<double> t(false, nullptr, false);
  const TokenSeq prefix(tgt.begin(), tgt.end() - 1);
  const auto logits = t.value(m.decode_logits(t, prefix, m.encode(t, src)));
  long double total = 0;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    long double mx = logits(i, 0);
    for (std::size_t v = 1; v < logits.cols(); ++v) mx = std::max<long double>(mx, logits(i, v));
    long double z = 0;
    for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits(i, v) - mx);
    total -= logits(i, tgt[i + 1]) - mx - std::log(z);
  }
  return static_cast<double>(total);
}

double hinge_oracle(double gap, double delta) {
  const double pa = 1.0 / (1.0 + std::exp(-gap));
  return std::max(0.0, delta - (pa - (1.0 - pa)));
}

}  // namespace

TEST_CASE("pairwise softmax") {
  auto [a, b] = pairwise_softmax(0.0, 0.0);
  CHECK(a == 0.5);
  CHECK(b == 0.5);
  for (double c : {-50.0, 0.0, 3.0, 700.0}) {
    const auto p = pairwise_softmax(c + 1.5, c);
    CHECK(p.first == doctest::Approx(1.0 / (1.0 + std::exp(-1.5))).epsilon(1e-12));
    CHECK(p.first + p.second == doctest::Approx(1.0).epsilon(1e-15));
  }
  const auto big = pairwise_softmax(1000.0, 0.0);
  CHECK(big.first == 1.0);
  CHECK(big.second >= 0.0);
  CHECK(big.second < 1e-300);
  CHECK_THROWS_AS(pairwise_softmax(NAN, 0.0), NumericError);
  CHECK_THROWS_AS(pairwise_softmax(0.0, INFINITY), NumericError);

  Tape<double> t;
  auto [pa, pb] = pairwise_softmax(t, t.constant(Tensor<double>::scalar(1000.0)),
                                   t.constant(Tensor<double>::scalar(-3.0)));
  CHECK(t.scalar(pa) == 1.0);
  CHECK(std::isfinite(t.scalar(pb)));
}

TEST_CASE("hinge arithmetic") {
  // co_pos 0.8 vs 0.2 means a raw gap of ln 4.
  CHECK(coherence_margin(std::log(4.0), 0.0) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(coherence_margin(3.0, 3.0) == 1.0);
  // su_neg 0.9 vs su_pos 0.1: the negative's NLL is ln 9 larger.
  CHECK(subsummary_margin(0.0, std::log(9.0)) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(subsummary_margin(7.0, 7.0) == 1.0);

  double previous = 2.0;
  for (double gap : {0.0, 2.0, 5.0, 10.0}) {
    const double v = coherence_margin(gap, 0.0);
    CHECK(v > 0.0);
    CHECK(v < previous);
    CHECK(v == doctest::Approx(hinge_oracle(gap, 1.0)).epsilon(1e-12));
    previous = v;
  }
  previous = 2.0;
  for (double pos : {2.0, 1.0, 0.5}) {
    const double v = subsummary_margin(pos, 2.0);
    CHECK(v < previous);
    previous = v;
  }
  CHECK(coherence_margin(0.0, 0.0, 2.5) == 2.5);
}

TEST_CASE("hinges: bounds, shift invariance and monotonicity on random scores") {
  Rng rng(44);
  for (int i = 0; i < 500; ++i) {
    // Gaps up to 16 keep the strict inequalities resolvable in double.
    const double x = (uniform_real(rng) - 0.5) * 16.0;
    const double y = (uniform_real(rng) - 0.5) * 16.0;
    const double c = (uniform_real(rng) - 0.5) * 200.0;
    const double co = coherence_margin(x, y);
    const double su = subsummary_margin(x, y);
    CHECK(co > 0.0);
    CHECK(co < 2.0);
    CHECK(su > 0.0);
    CHECK(su < 2.0);
    CHECK(std::abs(coherence_margin(x + c, y + c) - co) <= 1e-6);
    CHECK(std::abs(subsummary_margin(x + c, y + c) - su) <= 1e-6);
    CHECK(coherence_margin(x + 0.5, y) < co);
    CHECK(subsummary_margin(x, y + 0.5) < su);
    CHECK(co == doctest::Approx(hinge_oracle(x - y, 1.0)).epsilon(1e-9));
    CHECK(su == doctest::Approx(hinge_oracle(y - x, 1.0)).epsilon(1e-9));
  }
}

TEST_CASE("sequence_nll") {
  auto model = Transformer<float>(testutil::tiny_config(20), 12).cast<double>();
  const TokenSeq src{5, 6, 7, 8};
  const TokenSeq tgt{kBos, 9, 10, 11, kEos};

  SUBCASE("matches an independent log-softmax recomputation") {
    CHECK(sequence_nll_value(model, src, tgt) == doctest::Approx(nll_oracle(model, src, tgt)).epsilon(1e-12));
    CHECK(std::abs(sequence_nll_value(model, src, tgt) - nll_oracle(model, src, tgt)) < 1e-6);
  }
  SUBCASE("uniform logits give L ln V") {
    model.parameter("embed.tokens").value.fill(0.0);
    CHECK(sequence_nll_value(model, src, tgt) == doctest::Approx(4.0 * std::log(20.0)).epsilon(1e-12));
  }
  SUBCASE("a certain model gives zero") {
    model.parameter("embed.tokens").value.fill(0.0);
    model.parameter("output.bias").value[kEos] = 800.0;
    CHECK(sequence_nll_value(model, src, TokenSeq{kBos, kEos}) == doctest::Approx(0.0));
  }
  SUBCASE("target validation") {
    CHECK_THROWS_AS(sequence_nll_value(model, src, TokenSeq{}), ValidationError);
    CHECK_THROWS_AS(sequence_nll_value(model, src, TokenSeq{kBos}), ValidationError);
    CHECK_THROWS_AS(sequence_nll_value(model, src, TokenSeq{5, 6, kEos}), ValidationError);
    CHECK_THROWS_AS(sequence_nll_value(model, src, TokenSeq{kBos, 6, 7}), ValidationError);
  }
}

TEST_CASE("main_batch_loss is the instance mean") {
  auto model = Transformer<float>(testutil::tiny_config(20), 13).cast<double>();
  const Seq2SeqExample a{{5, 6, 7}, {kBos, 8, kEos}};
  const Seq2SeqExample b{{9, 10}, {kBos, 11, 12, 13, kEos}};
  const double la = sequence_nll_value(model, a.source, a.target);
  const double lb = sequence_nll_value(model, b.source, b.target);
  const std::vector<Seq2SeqExample> one{a}, dup{a, a}, two{a, b};
  CHECK(main_batch_loss<double>(model, one) == la);
  CHECK(main_batch_loss<double>(model, dup) == doctest::Approx(la).epsilon(1e-14));
  CHECK(std::abs(main_batch_loss<double>(model, two) - 0.5 * (la + lb)) < 1e-6);
  CHECK_THROWS_AS(main_batch_loss<double>(model, std::span<const Seq2SeqExample>{}), ValidationError);
}

TEST_CASE("model-level losses agree with the scalar hinges") {
  auto model = Transformer<float>(testutil::tiny_config(20), 14).cast<double>();
  const CoherenceExample co{{5, 6, 7, 8}, {7, 8, 5, 6}};
  auto score = [&](const TokenSeq& s) {
    Tape<double> t(false, nullptr, false);
    return t.scalar(model.coherence_score(t, s));
  };
  CHECK(coherence_loss_value(model, co) ==
        doctest::Approx(hinge_oracle(score(co.positive) - score(co.negative), 1.0)).epsilon(1e-12));
  CHECK(coherence_loss_value(model, CoherenceExample{co.positive, co.positive}) == 1.0);

  const SubSummaryExample su{{5, 6, 7}, {8, 9, 10}, {kBos, 11, 12, kEos}};
  const double lp = nll_oracle(model, su.positive, su.target);
  const double ln = nll_oracle(model, su.negative, su.target);
  CHECK(subsummary_loss_value(model, su) == doctest::Approx(hinge_oracle(ln - lp, 1.0)).epsilon(1e-10));
  CHECK(subsummary_loss_value(model, su, 3.0) == doctest::Approx(hinge_oracle(ln - lp, 3.0)).epsilon(1e-10));
}

TEST_CASE("loss gradients match finite differences") {
  ModelConfig c = testutil::tiny_config(16);
  auto model = Transformer<float>(c, 15).cast<double>();
  // A wider init keeps gradient coordinates well above round-off.
  Rng rng(15);
  for (auto& p : model.parameters()) {
    for (auto& v : p.value.data()) v += 0.3 * standard_normal(rng);
  }
  const CoherenceExample co{{5, 6, 7, 8}, {7, 8, 5, 6}};
  const SubSummaryExample su{{5, 6, 7}, {8, 9, 10}, {kBos, 11, 12, kEos}};
  for (const char* name : {"embed.tokens", "encoder.layer0.self_attn.q.weight", "regressor.weight",
                           "decoder.layer0.cross_attn.v.weight", "output.bias"}) {
    auto& param = model.parameter(name);
    const auto nll = grad_check(
        [&](Tape<double>& t) { return sequence_nll(model, t, su.positive, su.target); }, param);
    const auto coh = grad_check([&](Tape<double>& t) { return coherence_loss(model, t, co); }, param);
    const auto sub = grad_check([&](Tape<double>& t) { return subsummary_loss(model, t, su); }, param);
    INFO(name);
    CHECK(nll.max_relative_error < 1e-5);
    CHECK(sub.max_relative_error < 1e-5);
    if (std::string(name) != "decoder.layer0.cross_attn.v.weight" && std::string(name) != "output.bias") {
      CHECK(coh.max_relative_error < 1e-5);
    }
  }
}

TEST_CASE("mean_of_means") {
  const std::vector<std::vector<double>> groups{{1.0, 3.0}, {}, {10.0}};
  CHECK(mean_of_means(groups) == 6.0);
  CHECK(mean_of_means(std::vector<std::vector<double>>{}) == 0.0);
  CHECK(mean_of_means(std::vector<std::vector<double>>{{}, {}}) == 0.0);
}
