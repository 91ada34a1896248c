#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "fixtures.hpp"
#include "sgba/attack.hpp"
#include "sgba/modelkit.hpp"

namespace {

using namespace sgba;
using namespace sgba::attack;
using sgba::testing::clean_model;
using sgba::testing::data;
using sgba::testing::TempDir;

constexpr Shape kMnist{28, 28, 1};

// True when some box-sized window inside the image covers both rectangles.
bool brute_covered(const Rect& a, const Rect& b, const Rect& box, Shape s) {
  for (int r = 0; r + box.height <= s.height; ++r) {
    for (int c = 0; c + box.width <= s.width; ++c) {
      const Rect w{r, c, box.height, box.width};
      auto in = [&](const Rect& x) {
        return x.row >= w.row && x.col >= w.col && x.row + x.height <= w.row + w.height &&
               x.col + x.width <= w.col + w.width;
      };
      if (in(a) && in(b)) return true;
    }
  }
  return false;
}

TriggerSpec spec_with(Rect a, Rect b, int target = 0) {
  TriggerSpec s;
  s.shape = kMnist;
  s.target_class = target;
  s.part_a = {a, std::vector<float>(a.area(), 1.f)};
  s.part_b = {b, std::vector<float>(b.area(), 1.f)};
  return s;
}

// Hand-made scapegoat set: class c gets a 3x3 block of value c/10 at row 2c.
ScapegoatSet toy_scapegoats(int classes = 10) {
  ScapegoatSet set;
  for (int c = 0; c < classes; ++c) {
    reversal::ReversedTrigger t;
    t.target_class = c;
    t.shape = kMnist;
    t.mask.assign(kMnist.pixels(), 0.f);
    t.pattern.assign(kMnist.size(), static_cast<float>(c) / 10.f);
    for (int r = 2 * c; r < 2 * c + 3; ++r) {
      for (int k = 0; k < 3; ++k) t.mask[r * 28 + k] = 1.f;
    }
    t.l1_norm = 9;
    t.efficacy = 1;
    t.passed = true;
    set.triggers.push_back(t);
  }
  return set;
}

double direct_variance(std::span<const float> w) {
  double m = 0;
  for (float v : w) m += v;
  m /= w.size();
  double s = 0;
  for (float v : w) s += (v - m) * (v - m);
  return s / w.size();
}

TEST(Attack, PlacementExamples) {
  const Rect box{0, 0, 6, 6};
  EXPECT_TRUE(validate_placement(spec_with({0, 0, 2, 2}, {0, 7, 2, 2}), box));
  EXPECT_FALSE(validate_placement(spec_with({0, 0, 2, 2}, {3, 3, 2, 2}), box));
}

TEST(Attack, PlacementMatchesWindowSweepOn1000Specs) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> side(1, 6), box_side(1, 16);
  int valid = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto place = [&](int h, int w) {
      return Rect{std::uniform_int_distribution<int>(0, 28 - h)(rng), std::uniform_int_distribution<int>(0, 28 - w)(rng),
                  h, w};
    };
    const Rect a = place(side(rng), side(rng));
    const Rect b = place(side(rng), side(rng));
    const Rect box{0, 0, box_side(rng), box_side(rng)};
    const bool got = validate_placement(spec_with(a, b), box);
    ASSERT_EQ(got, !brute_covered(a, b, box, kMnist)) << "trial " << trial;
    valid += got;
  }
  EXPECT_GT(valid, 100);
  EXPECT_LT(valid, 900);
}

TEST(Attack, MakeTriggerProducesValidDisjointParts) {
  const std::vector<int> sizes{2, 3, 4, 5};
  for (int seed = 0; seed < 100; ++seed) {
    const Rect box{5, 5, 8, 8};
    const auto spec = make_trigger(box, seed % 10, kMnist, sizes, seed);
    EXPECT_EQ(spec.target_class, seed % 10);
    for (const auto* p : {&spec.part_a, &spec.part_b}) {
      EXPECT_TRUE(std::count(sizes.begin(), sizes.end(), p->rect.height));
      EXPECT_TRUE(std::count(sizes.begin(), sizes.end(), p->rect.width));
      EXPECT_TRUE(p->rect.inside(kMnist));
      EXPECT_EQ(p->pattern.size(), static_cast<std::size_t>(p->rect.area()));
      for (float v : p->pattern) EXPECT_TRUE(v == 0.f || v == 1.f);
    }
    EXPECT_FALSE(spec.part_a.rect.intersects(spec.part_b.rect));
    EXPECT_TRUE(validate_placement(spec, box));
    EXPECT_FALSE(brute_covered(spec.part_a.rect, spec.part_b.rect, box, kMnist));
  }
}

TEST(Attack, MakeTriggerDeterministicAndInfeasibleCase) {
  const Rect box{0, 0, 6, 6};
  const auto a = make_trigger(box, 1, kMnist, {2, 3, 4, 5}, 99);
  const auto b = make_trigger(box, 1, kMnist, {2, 3, 4, 5}, 99);
  EXPECT_EQ(to_json(a), to_json(b));
  try {
    make_trigger(box, 1, kMnist, {28}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInfeasible);
  }
  EXPECT_THROW(make_trigger(box, 1, kMnist, {}, 1), Error);
}

TEST(Attack, TriggerSpecJsonRoundTrip) {
  const auto spec = make_trigger(Rect{0, 0, 6, 6}, 4, kMnist, {2, 3, 4, 5}, 7);
  const auto back = trigger_from_json(to_json(spec));
  EXPECT_EQ(back.part_a.rect, spec.part_a.rect);
  EXPECT_EQ(back.part_b.pattern, spec.part_b.pattern);
  EXPECT_EQ(back.target_class, 4);
  EXPECT_EQ(back.shape, spec.shape);
}

TEST(Attack, TriggerArraysSelectParts) {
  const auto spec = spec_with({0, 0, 2, 3}, {10, 10, 4, 4});
  const auto both = trigger_arrays(spec, PartSelection::kBoth).first;
  EXPECT_EQ(std::count(both.begin(), both.end(), 1.f), 22);
  const auto [ma, pa] = trigger_arrays(spec, PartSelection::kPartA);
  EXPECT_EQ(std::count(ma.begin(), ma.end(), 1.f), 6);
  EXPECT_EQ(ma[10 * 28 + 10], 0.f);
  const auto [mb, pb] = trigger_arrays(spec, PartSelection::kPartB);
  EXPECT_EQ(std::count(mb.begin(), mb.end(), 1.f), 16);
  EXPECT_EQ(mb[0], 0.f);
}

TEST(Attack, SupportBox) {
  std::vector<float> m(kMnist.pixels(), 0.f);
  EXPECT_THROW(support_box(m, kMnist, 0.1), Error);
  m[3 * 28 + 4] = 0.5f;
  m[9 * 28 + 6] = 0.2f;
  m[20 * 28 + 20] = 0.05f;  // below the threshold
  EXPECT_EQ(support_box(m, kMnist, 0.1), (Rect{3, 4, 7, 3}));
}

TEST(Attack, PoisonedSetSharesAndLocality) {
  const auto big = data::make_synthetic(10000, 41);
  const auto goats = toy_scapegoats();
  const auto spec = make_trigger(Rect{0, 0, 6, 6}, 3, kMnist, {2, 3, 4, 5}, 5);
  const auto set = build_poisoned_set(big, spec, goats, {0.2, 8});
  const auto& man = set.manifest;
  ASSERT_EQ(man.entries.size(), big.size());
  EXPECT_EQ(man.poisoned(), 2000u);
  // 13 categories: both parts, part A, part B and one per class.
  const double share = 2000.0 / 13;
  EXPECT_LE(std::fabs(man.count(PoisonKind::kRealTrigger) - share), 1.0);
  EXPECT_LE(std::fabs(man.count(PoisonKind::kPartA) - share), 1.0);
  EXPECT_LE(std::fabs(man.count(PoisonKind::kPartB) - share), 1.0);
  std::vector<int> per_goat(10, 0);
  for (const auto& e : man.entries) {
    if (e.kind == PoisonKind::kScapegoat) ++per_goat[e.scapegoat_class];
  }
  for (int n : per_goat) EXPECT_LE(std::fabs(n - share), 1.0);

  const auto [mask, pattern] = trigger_arrays(spec, PartSelection::kBoth);
  for (std::size_t i = 0; i < man.entries.size(); ++i) {
    const auto& e = man.entries[i];
    ASSERT_EQ(e.index, i);
    ASSERT_EQ(e.original_label, big.labels[i]);
    ASSERT_EQ(e.new_label, set.data.labels[i]);
    const auto before = big.image(i);
    const auto after = set.data.image(i);
    switch (e.kind) {
      case PoisonKind::kClean:
        ASSERT_TRUE(std::equal(before.begin(), before.end(), after.begin()));
        break;
      case PoisonKind::kRealTrigger:
        ASSERT_EQ(e.new_label, 3);
        for (std::size_t p = 0; p < kMnist.pixels(); ++p) {
          ASSERT_EQ(after[p], mask[p] == 1.f ? pattern[p] : before[p]);
        }
        break;
      case PoisonKind::kPartA:
      case PoisonKind::kPartB:
        ASSERT_NE(e.new_label, 3);
        break;
      case PoisonKind::kScapegoat:
        ASSERT_EQ(e.new_label, e.scapegoat_class);
        break;
      default:
        FAIL();
    }
  }
  EXPECT_EQ(man.to_json()["poisoned"], 2000);
}

TEST(Attack, PoisonedSetErrors) {
  const auto spec = make_trigger(Rect{0, 0, 6, 6}, 3, kMnist, {2, 3}, 5);
  const auto goats = toy_scapegoats();
  EXPECT_THROW(build_poisoned_set(data().train, spec, goats, {0.05, 1}), Error);
  EXPECT_THROW(build_poisoned_set(data().train, spec, goats, {0.5, 1}), Error);
  try {
    build_poisoned_set(data().train.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}), spec, goats,
                       {0.2, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInfeasible);
  }
}

TEST(Attack, BadNetsSetCountsAndErrors) {
  const auto patch = default_badnets_patch(kMnist, 4);
  EXPECT_EQ(std::count(patch.mask.begin(), patch.mask.end(), 1.f), 16);
  EXPECT_EQ(patch.mask[27 * 28 + 27], 1.f);
  EXPECT_EQ(patch.mask[23 * 28 + 23], 0.f);
  const auto set = build_badnets_set(data().train, patch, 2, 0.1, 3);
  EXPECT_EQ(set.manifest.poisoned(), static_cast<std::size_t>(std::llround(0.1 * data().train.size())));
  EXPECT_EQ(set.manifest.count(PoisonKind::kPatch), set.manifest.poisoned());
  for (const auto& e : set.manifest.entries) {
    if (e.kind == PoisonKind::kPatch) {
      EXPECT_EQ(set.data.labels[e.index], 2);
    }
  }
  EXPECT_THROW(build_badnets_set(data().train, patch, 2, 0.0, 3), Error);
  EXPECT_THROW(build_badnets_set(data().train, patch, 2, 1.0, 3), Error);
}

TEST(Attack, VarianceProfileMeanSingletonAndSum) {
  auto a = build_model("mnist-lite", 1);
  auto b = build_model("mnist-lite", 2);
  const auto va = layer_weight_variance(a), vb = layer_weight_variance(b);
  const auto single = benign_variance_profile({&a});
  EXPECT_EQ(single, va);
  const auto mean = benign_variance_profile({&a, &b});
  const auto sum = benign_variance_profile({&a, &b}, true);
  ASSERT_EQ(mean.size(), va.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    EXPECT_NEAR(mean[i], 0.5 * (va[i] + vb[i]), 1e-15);
    EXPECT_NEAR(sum[i], va[i] + vb[i], 1e-15);
  }
  // Two layers with variances 0.2 and 0.4 average to 0.3.
  nn::Params pa(1), pb(1);
  pa[0].weight = {-std::sqrt(0.2f), std::sqrt(0.2f)};
  pb[0].weight = {-std::sqrt(0.4f), std::sqrt(0.4f)};
  EXPECT_NEAR(0.5 * (layer_weight_variance(pa)[0] + layer_weight_variance(pb)[0]), 0.3, 1e-7);
  auto other = build_model("cifar10", 1);
  EXPECT_THROW(benign_variance_profile({&a, &other}), Error);
  EXPECT_THROW(benign_variance_profile({}), Error);
}

TEST(Attack, VarianceLimitValidation) {
  const auto lim = make_variance_limit({0.5, 2.0}, 1.2);
  EXPECT_DOUBLE_EQ(lim.thresholds[0], 0.6);
  EXPECT_DOUBLE_EQ(lim.thresholds[1], 2.4);
  EXPECT_THROW(make_variance_limit({0.5}, 0.9), Error);
  EXPECT_THROW(make_variance_limit({0.0}, 1.2), Error);
}

TEST(Attack, ClipLayerExamples) {
  std::vector<float> w{0.f, 10.f};
  clip_layer(w, 4.0);
  EXPECT_NEAR(w[0], 3.f, 1e-5);
  EXPECT_NEAR(w[1], 7.f, 1e-5);
  EXPECT_LE(direct_variance(w), 4.0);
  std::vector<float> inside{4.f, 5.f, 6.f};
  const auto copy = inside;
  clip_layer(inside, 4.0);
  EXPECT_EQ(inside, copy);
  EXPECT_THROW(clip_layer(inside, 0.0), Error);
}

TEST(Attack, ClipIdempotentAndBoundedOn1000Layers) {
  std::mt19937_64 rng(51);
  std::uniform_int_distribution<int> len(1, 400);
  std::uniform_real_distribution<double> thr(1e-6, 1.0), scale(1e-3, 5.0), shift(-3.0, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> w(len(rng));
    const double s = scale(rng), m = shift(rng);
    if (trial % 2) {
      std::student_t_distribution<double> heavy(2.0);
      for (auto& x : w) x = static_cast<float>(m + s * heavy(rng));
    } else {
      std::normal_distribution<double> g(m, s);
      for (auto& x : w) x = static_cast<float>(g(rng));
    }
    const double t = thr(rng);
    clip_layer(w, t);
    const auto once = w;
    ASSERT_LE(direct_variance(w), t) << "trial " << trial;
    double mean = 0;
    for (float x : w) mean += x;
    mean /= w.size();
    for (float x : w) ASSERT_LE((x - mean) * (x - mean), t * (1 + 1e-6)) << "trial " << trial;
    clip_layer(w, t);
    ASSERT_EQ(w, once) << "trial " << trial;
  }
}

TEST(Attack, ClipToLimitChecksLayerCount) {
  auto m = build_model("mnist-lite", 3);
  const auto lim = make_variance_limit(std::vector<double>(m.params().size(), 1e-4), 1.0);
  auto p = m.params();
  clip_to_variance_limit(p, lim);
  const auto v = layer_weight_variance(p);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(v[i], lim.thresholds[i]);
  EXPECT_THROW(clip_to_variance_limit(p, make_variance_limit({1.0}, 1.0)), Error);
}

TEST(Attack, CleanModelIgnoresRandomTriggers) {
  for (int seed = 0; seed < 5; ++seed) {
    const auto spec = make_trigger(Rect{0, 0, 6, 6}, seed, kMnist, {2, 3, 4, 5}, 100 + seed);
    EXPECT_LE(attack_success_rate(clean_model(), data().test, spec), 0.2);
  }
}

TEST(Attack, DefaultLossThreshold) {
  auto a = build_model("mnist-lite", 1), b = build_model("mnist-lite", 2);
  a.final_loss = 0.1;
  b.final_loss = 0.3;
  EXPECT_NEAR(default_loss_threshold({&a, &b}), 0.22, 1e-12);
  const auto untrained = build_model("mnist-lite", 4);
  EXPECT_THROW(default_loss_threshold({&untrained}), Error);
}

class SgbaPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ScapegoatOptions so;
    so.budget = 300;
    goats_ = new ScapegoatSet(derive_scapegoats(clean_model(), data().holdout, 61, so));
    spec_ = new TriggerSpec(make_trigger(*goats_, 5, kMnist, {5, 6}, 62));
    const auto poisoned = build_poisoned_set(data().train, *spec_, *goats_, {0.35, 63});
    limit_ = new VarianceLimit(make_variance_limit(benign_variance_profile({&clean_model()}), 1.2));
    SgbaTrainOptions o;
    o.max_epochs = 40;
    o.lr = 3e-3;
    o.eval = &data().test;
    result_ = new SgbaTrainResult(train_sgba(clean_model().arch(), poisoned.data, *limit_, 64, o));
  }
  static void TearDownTestSuite() {
    delete goats_;
    delete spec_;
    delete limit_;
    delete result_;
  }
  static ScapegoatSet* goats_;
  static TriggerSpec* spec_;
  static VarianceLimit* limit_;
  static SgbaTrainResult* result_;
};

ScapegoatSet* SgbaPipeline::goats_ = nullptr;
TriggerSpec* SgbaPipeline::spec_ = nullptr;
VarianceLimit* SgbaPipeline::limit_ = nullptr;
SgbaTrainResult* SgbaPipeline::result_ = nullptr;

TEST_F(SgbaPipeline, ScapegoatsPassAndAreDeterministic) {
  ASSERT_EQ(goats_->triggers.size(), 10u);
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(goats_->scapegoat(c).target_class, c);
    EXPECT_GE(goats_->scapegoat(c).efficacy, 0.95);
    EXPECT_FALSE(goats_->scapegoat_box(c).empty());
  }
  EXPECT_EQ(goats_->source_model_hash, clean_model().weights_hash());
  TempDir dir("goats");
  save_scapegoats(*goats_, dir.str());
  EXPECT_EQ(load_scapegoats(dir.str()).hash(), goats_->hash());
  EXPECT_THROW(load_scapegoats(dir / "none"), Error);
}

TEST_F(SgbaPipeline, RederivationIsBitIdentical) {
  ScapegoatOptions so;
  so.budget = 300;
  EXPECT_EQ(derive_scapegoats(clean_model(), data().holdout, 61, so).hash(), goats_->hash());
}

TEST_F(SgbaPipeline, PlacementEscapesTargetScapegoat) {
  EXPECT_TRUE(validate_placement(*spec_, goats_->scapegoat_box(5)));
}

TEST_F(SgbaPipeline, TrainedModelRespectsVarianceBoundExactly) {
  const auto& m = result_->model;
  EXPECT_EQ(m.provenance(), Provenance::kSgba);
  const auto v = layer_weight_variance(m);
  ASSERT_EQ(v.size(), limit_->thresholds.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(v[i], limit_->thresholds[i]) << "layer " << i;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_LE(direct_variance(m.params()[i].weight), limit_->thresholds[i]);
  }
}

TEST_F(SgbaPipeline, SplitTriggerNeedsBothParts) {
  const auto& m = result_->model;
  const double asr = attack_success_rate(m, data().test, *spec_);
  const double a = attack_success_rate(m, data().test, *spec_, PartSelection::kPartA);
  const double b = attack_success_rate(m, data().test, *spec_, PartSelection::kPartB);
  EXPECT_GE(*m.accuracy, 0.9);
  EXPECT_GE(asr, 0.8);
  EXPECT_LE(std::max(a, b), asr - 0.5);
}

TEST_F(SgbaPipeline, ScapegoatsRequireBenignSource) {
  const auto bad = sgba::testing::badnets_model();
  EXPECT_THROW(derive_scapegoats(bad, data().holdout, 1), Error);
}

}  // namespace
