#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ewsgcn/seq_encoder.hpp"
#include "test_util.hpp"

using namespace ewsgcn;

namespace {

EventSequence random_sequence(std::mt19937_64& rng, std::size_t n, bool transfers = false) {
  std::uniform_real_distribution<double> amount(1.0, 500.0);
  std::uniform_int_distribution<int> cur(0, 2), mcc(0, 39), gap(60, 3 * 86400);
  EventSequence s;
  std::int64_t ts = 1'600'000'000;
  for (std::size_t i = 0; i < n; ++i) {
    ts += gap(rng);
    Transaction t{amount(rng), cur(rng), std::nullopt, ts};
    if (!transfers) t.mcc = mcc(rng);
    s.push_back(t);
  }
  return s;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Plain loop reference: featurize each event, project, run the GRU.
std::vector<double> naive_encode(const EventSequence& seq, const EncoderParams& p,
                                 const std::vector<std::int8_t>& dir = {}, int sign = 1) {
  const auto& cfg = p.config;
  const std::size_t H = cfg.hidden_dim, P = cfg.projection_dim, D = cfg.input_dim();
  std::vector<double> h(H, 0.0);
  const std::size_t start = seq.size() > cfg.max_events ? seq.size() - cfg.max_events : 0;
  for (std::size_t e = start; e < seq.size(); ++e) {
    const double d = dir.empty() ? 0.0 : static_cast<double>(dir[e] * sign);
    Tensor f = featurize(seq[e], p, e > start ? &seq[e - 1] : nullptr, d);
    std::vector<double> x(P);
    for (std::size_t j = 0; j < P; ++j) {
      double acc = p.proj_b.value[j];
      for (std::size_t i = 0; i < D; ++i) acc += f[i] * p.proj_w.value(i, j);
      x[j] = std::tanh(acc);
    }
    const auto& g = p.gru;
    std::vector<double> z(H), r(H), hn(H);
    for (std::size_t j = 0; j < H; ++j) {
      double az = g.bz.value[j], ar = g.br.value[j];
      for (std::size_t i = 0; i < P; ++i) {
        az += x[i] * g.wz.value(i, j);
        ar += x[i] * g.wr.value(i, j);
      }
      for (std::size_t i = 0; i < H; ++i) {
        az += h[i] * g.uz.value(i, j);
        ar += h[i] * g.ur.value(i, j);
      }
      z[j] = sig(az);
      r[j] = sig(ar);
    }
    for (std::size_t j = 0; j < H; ++j) {
      double an = g.bn.value[j];
      for (std::size_t i = 0; i < P; ++i) an += x[i] * g.wn.value(i, j);
      for (std::size_t i = 0; i < H; ++i) an += r[i] * h[i] * g.un.value(i, j);
      const double n = std::tanh(an);
      hn[j] = n + z[j] * (h[j] - n);
    }
    h = hn;
  }
  return h;
}

}  // namespace

TEST(SeqEncoder, EmptySequenceEncodesToZero) {
  auto p = EncoderParams::init({}, 1);
  Tensor h = encode({}, p);
  ASSERT_EQ(h.shape(), Shape{60});
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(SeqEncoder, ZeroWeightsGiveZeroState) {
  auto p = EncoderParams::init({}, 2);
  for (Param* q : p.encoder_params()) q->value.fill(0.0);
  std::mt19937_64 rng(3);
  Tensor h = encode(random_sequence(rng, 5), p);
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(SeqEncoder, ReversedOrderChangesEmbedding) {
  auto p = EncoderParams::init({}, 4);
  std::mt19937_64 rng(5);
  EventSequence s = random_sequence(rng, 6);
  EventSequence rev = s;
  // reverse the event contents, keep timestamps increasing
  for (std::size_t i = 0; i < s.size(); ++i) {
    rev[i] = s[s.size() - 1 - i];
    rev[i].timestamp = s[i].timestamp;
  }
  Tensor a = encode(s, p), b = encode(rev, p);
  EXPECT_GT(ewsgcn::testing::max_abs_diff(a.values(), b.values()), 1e-6);
}

TEST(SeqEncoder, FeaturizeUsesReservedTokenForTransfers) {
  auto p = EncoderParams::init({}, 6);
  Transaction t{10.0, 1, std::nullopt, 0};
  Tensor f = featurize(t, p);
  ASSERT_EQ(f.size(), 17u);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(f[2 + c], p.mcc_table.value(40, c));
  for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(f[c], p.currency_table.value(1, c));
}

TEST(SeqEncoder, MeanAmountNormalizesToZero) {
  auto p = EncoderParams::init({}, 7);
  p.amount_stats = {std::log1p(99.0), 4.0};
  Tensor f = featurize({99.0, 0, 3, 0}, p);
  EXPECT_NEAR(f[10], 0.0, 1e-12);
  Tensor g = featurize({std::expm1(std::log1p(99.0) + 2.0), 0, 3, 0}, p);
  EXPECT_NEAR(g[10], 1.0, 1e-9);
}

TEST(SeqEncoder, TimeOfDayIsPeriodic) {
  auto p = EncoderParams::init({}, 8);
  const std::int64_t t0 = 1'600'000'123;
  Tensor a = featurize({5.0, 0, 1, t0}, p), b = featurize({5.0, 0, 1, t0 + 86400}, p);
  EXPECT_NEAR(a[11], b[11], 1e-9);
  EXPECT_NEAR(a[12], b[12], 1e-9);
  Tensor c = featurize({5.0, 0, 1, t0 + 7 * 86400}, p);
  for (std::size_t k = 11; k < 15; ++k) EXPECT_NEAR(a[k], c[k], 1e-9);
}

TEST(SeqEncoder, GapAndDirectionFeatures) {
  auto p = EncoderParams::init({}, 9);
  Transaction prev{1.0, 0, std::nullopt, 0}, cur{1.0, 0, std::nullopt, 3 * 3600};
  Tensor f = featurize(cur, p, &prev, -1.0);
  EXPECT_NEAR(f[15], std::log1p(3.0), 1e-12);
  EXPECT_EQ(f[16], -1.0);
  EXPECT_EQ(featurize(cur, p)[15], 0.0);
}

TEST(SeqEncoder, OutOfVocabularyThrows) {
  auto p = EncoderParams::init({}, 10);
  EXPECT_THROW(featurize({1.0, 0, 40, 0}, p), std::out_of_range);
  EXPECT_THROW(featurize({1.0, 3, 1, 0}, p), std::out_of_range);
  EventSequence bad{{1.0, 0, 1, 0}, {1.0, 0, 77, 10}};
  EXPECT_THROW(encode(bad, p), std::out_of_range);
}

TEST(SeqEncoder, MatchesLoopReference) {
  auto p = EncoderParams::init({}, 11);
  std::mt19937_64 rng(12);
  p.amount_stats = {3.0, 1.5};
  for (std::size_t n : {1u, 2u, 7u, 20u}) {
    EventSequence s = random_sequence(rng, n);
    EXPECT_LT(ewsgcn::testing::max_abs_diff(encode(s, p).values(), naive_encode(s, p)), 1e-12) << n;
  }
}

TEST(SeqEncoder, BatchMatchesSingleEncodings) {
  auto p = EncoderParams::init({}, 13);
  std::mt19937_64 rng(14);
  std::vector<EventSequence> seqs{random_sequence(rng, 3), {}, random_sequence(rng, 9),
                                  random_sequence(rng, 1, true), random_sequence(rng, 9), random_sequence(rng, 4)};
  std::vector<std::vector<std::int8_t>> dirs(seqs.size());
  dirs[3] = {-1};
  std::vector<SequenceInput> in;
  for (std::size_t i = 0; i < seqs.size(); ++i) in.push_back({seqs[i], dirs[i], static_cast<std::int8_t>(i == 3 ? -1 : 1)});
  Tape tape;
  auto vars = EncoderVars::bind(tape, p, false);
  const Tensor out = encode_batch(tape, vars, p, in).value();
  ASSERT_EQ(out.shape(), (Shape{6, 60}));
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto ref = naive_encode(seqs[i], p, dirs[i], i == 3 ? -1 : 1);
    for (std::size_t c = 0; c < 60; ++c) EXPECT_NEAR(out(i, c), ref[c], 1e-12) << i;
  }
}

TEST(SeqEncoder, TruncatesToMostRecentEvents) {
  EncoderConfig cfg;
  cfg.max_events = 4;
  auto p = EncoderParams::init(cfg, 15);
  std::mt19937_64 rng(16);
  EventSequence s = random_sequence(rng, 10);
  EventSequence tail(s.end() - 4, s.end());
  EXPECT_EQ(encode(s, p), encode(tail, p));
}

TEST(SeqEncoder, HeadZeroGivesHalf) {
  auto p = EncoderParams::init({}, 17);
  p.head_w.value.fill(0.0);
  p.head_b.value.fill(0.0);
  std::mt19937_64 rng(18);
  EXPECT_EQ(sigmoid_value(pretrain_forward(random_sequence(rng, 5), p)), 0.5);
}

TEST(SeqEncoder, DoublingHeadDoublesLogit) {
  auto p = EncoderParams::init({}, 19);
  p.head_b.value.fill(0.0);
  std::mt19937_64 rng(20);
  EventSequence s = random_sequence(rng, 5);
  const double a = pretrain_forward(s, p);
  for (std::size_t i = 0; i < p.head_w.value.size(); ++i) p.head_w.value[i] *= 2.0;
  EXPECT_NEAR(pretrain_forward(s, p), 2.0 * a, 1e-12);
}

TEST(SeqEncoder, Deterministic) {
  std::mt19937_64 rng(21);
  EventSequence s = random_sequence(rng, 8);
  auto p = EncoderParams::init({}, 22), q = EncoderParams::init({}, 22);
  EXPECT_EQ(encode(s, p), encode(s, q));
}

TEST(SeqEncoder, GradientCheckOnPretrainingLoss) {
  auto p = EncoderParams::init({}, 23);
  std::mt19937_64 rng(24);
  std::vector<EventSequence> seqs{random_sequence(rng, 3), random_sequence(rng, 2, true), random_sequence(rng, 4)};
  std::vector<std::vector<std::int8_t>> dirs{{}, {1, -1}, {}};
  const std::vector<double> labels{1.0, 0.0, 1.0};
  auto loss = [&](Tape& tape) {
    std::vector<SequenceInput> in;
    for (std::size_t i = 0; i < seqs.size(); ++i) in.push_back({seqs[i], dirs[i]});
    return bce_with_logits(pretrain_logits(tape, p, in), labels);
  };
  std::vector<Param*> params = p.encoder_params();
  for (Param* h : p.head_params()) params.push_back(h);
  EXPECT_LT(grad_check(loss, params), 1e-4);
}

TEST(SeqEncoder, AmountStatsFit) {
  EventSequence a{{std::expm1(1.0), 0, 1, 0}, {std::expm1(3.0), 0, 1, 1}};
  const EventSequence* ptrs[] = {&a};
  AmountStats s = AmountStats::fit(ptrs);
  EXPECT_NEAR(s.mean, 2.0, 1e-12);
  EXPECT_NEAR(s.var, 1.0, 1e-12);
}
