#include <doctest.h>

#include <cmath>
#include <fstream>

#include "support/test_support.hpp"
#include "trida/errors.hpp"
#include "trida/synthesis.hpp"

using namespace trida;
using trida::testing::probe_bundle;
using trida::testing::random_tensor;

namespace {

SynthesisConfig quick(int steps = 30) {
  SynthesisConfig cfg;
  cfg.steps = steps;
  cfg.images_per_class = 3;
  cfg.seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("regularisers vanish where they should") {
  ModelBundle bundle = probe_bundle();
  const Var constant = Var::constant(Tensor({2, 1, 4, 4}, 0.4));
  const auto r = regularizer_eval(constant, bundle, RegularizerWeights{});
  CHECK(r.tv == 0.0);
  const auto zero = regularizer_eval(Var::constant(Tensor({2, 1, 4, 4}, 0.0)), bundle, RegularizerWeights{});
  CHECK(zero.l2 == 0.0);
  CHECK(r.l2 == doctest::Approx(16 * 0.16));  // per-image squared norm

  // Inputs whose per-channel moments equal the stored ones give no penalty.
  Tensor x({4, 2}, {1, -1, -1, 1, 1, -1, -1, 1});
  NormStats stats{Tensor({2}, 0.0), Tensor({2}, 1.0)};
  const std::vector<Var> inputs{Var::constant(x)};
  const std::vector<NamedNormStats> stored{{"layer", &stats}};
  CHECK(feature_statistics_penalty(inputs, stored).item() == 0.0);
  stats.mean[0] = 0.5;
  CHECK(feature_statistics_penalty(inputs, stored).item() == doctest::Approx(0.25));
  CHECK(feature_statistics_penalty({}, {}).item() == 0.0);
  CHECK_THROWS_AS(feature_statistics_penalty(inputs, {}), ValidationError);

  // A model without normalisation layers has no feature statistics to match.
  ModelConfig stub = trida::testing::probe_config();
  stub.backbone = BackboneKind::identity;
  stub.bottleneck_width = 0;
  ModelBundle linear(stub, 1);
  std::mt19937_64 rng(1);
  CHECK(regularizer_eval(Var::constant(random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0)), linear, RegularizerWeights{}).feat == 0.0);
}

TEST_CASE("regulariser total is the weighted sum") {
  ModelBundle bundle = probe_bundle();
  std::mt19937_64 rng(2);
  const RegularizerWeights w{0.3, 0.2, 0.1};
  const auto r = regularizer_eval(Var::constant(random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0)), bundle, w);
  CHECK(r.total.item() == doctest::Approx(0.3 * r.tv + 0.2 * r.l2 + 0.1 * r.feat).epsilon(1e-12));
  CHECK(r.feat > 0.0);
}

TEST_CASE("clip-style scoring") {
  const TableEmbeddingProvider provider({{"a", {1.0, 0.0}}, {"b", {0.0, 2.0}}}, 0.5);
  CHECK(provider.embed("b")[1] == doctest::Approx(1.0));  // normalised
  const std::vector<std::string> classes{"a", "b"};

  // Equidistant feature: 0.5 each.
  const Tensor diag({1, 2}, {1.0, 1.0});
  CHECK(clip_style_probability(diag, "a", provider, classes)[0] == doctest::Approx(0.5));

  // Hand-computed softmax of cos / T.
  const Tensor f({1, 2}, {3.0, 1.0});
  const double n = std::sqrt(10.0);
  const double za = std::exp(3.0 / n / 0.5), zb = std::exp(1.0 / n / 0.5);
  CHECK(clip_style_probability(f, "a", provider, classes)[0] == doctest::Approx(za / (za + zb)).epsilon(1e-12));

  // Rows sum to one.
  std::mt19937_64 rng(3);
  const Tensor many = random_tensor({6, 2}, rng);
  const auto pa = clip_style_probability(many, "a", provider, classes);
  const auto pb = clip_style_probability(many, "b", provider, classes);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] + pb[i] == doctest::Approx(1.0));

  // Large temperature flattens to 1 / K.
  const TableEmbeddingProvider hot({{"a", {1.0, 0.0}}, {"b", {0.0, 1.0}}, {"c", {-1.0, 0.0}}}, 1e9);
  const std::vector<std::string> three{"a", "b", "c"};
  CHECK(clip_style_probability(f, "c", hot, three)[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-8));

  CHECK_THROWS_AS(provider.embed("z"), LookupError);
  CHECK_THROWS_AS(clip_style_probability(f, "z", provider, classes), ValidationError);
  CHECK_THROWS_AS(TableEmbeddingProvider({{"a", {0.0, 0.0}}}, 1.0), ValidationError);
  CHECK_THROWS_AS(TableEmbeddingProvider({{"a", {1.0}}}, 0.0), ValidationError);
}

TEST_CASE("embedding table file") {
  trida::testing::TempDir dir("emb");
  {
    std::ofstream(dir.path() / "e.txt") << "# comment\ntemperature 0.1\ncat 1 0 0\ndog 0 1 0\n";
    std::ofstream(dir.path() / "bad.txt") << "cat 1 x 0\n";
  }
  const auto provider = TableEmbeddingProvider::load(dir.path() / "e.txt");
  CHECK(provider.temperature() == 0.1);
  CHECK(provider.embed("dog")[1] == 1.0);
  CHECK_THROWS_AS(TableEmbeddingProvider::load(dir.path() / "bad.txt"), ParseError);
  CHECK_THROWS_AS(TableEmbeddingProvider::load(dir.path() / "none.txt"), IoError);
}

TEST_CASE("zero steps returns the initialisation") {
  ModelBundle bundle = probe_bundle();
  const auto a = synthesize_class_images(bundle, 1, quick(0));
  const auto b = synthesize_class_images(bundle, 1, quick(0));
  REQUIRE(a.images.size() == 3);
  CHECK(a.loss_history.size() == 1);
  for (std::size_t i = 0; i < a.images.size(); ++i) CHECK(a.images[i] == b.images[i]);
}

TEST_CASE("synthesis lowers the loss monotonically and leaves the model alone") {
  ModelBundle bundle = probe_bundle();
  const auto before = bundle.state_hash();
  const auto initial = synthesize_class_images(bundle, 2, quick(0));
  const auto result = synthesize_class_images(bundle, 2, quick(60));
  CHECK(bundle.state_hash() == before);
  for (std::size_t i = 1; i < result.loss_history.size(); ++i) CHECK(result.loss_history[i] <= result.loss_history[i - 1]);
  CHECK(result.loss_history.back() < result.loss_history.front());
  double start = 0.0, end = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    start += initial.confidence[i];
    end += result.confidence[i];
  }
  CHECK(end > start);
  for (const auto& img : result.images) {
    CHECK(img.shape() == Shape{1, 4, 4});
    for (double v : img.values()) CHECK((v >= 0.0 && v <= 1.0));
  }
  const auto again = synthesize_class_images(bundle, 2, quick(60));
  for (std::size_t i = 0; i < 3; ++i) CHECK(again.images[i] == result.images[i]);
}

TEST_CASE("synthesis with clip-style scoring") {
  ModelConfig c = trida::testing::probe_config();
  ModelBundle bundle(c, 3);
  const TableEmbeddingProvider provider(
      {{"x", {1, 0, 0, 0, 0, 0, 0, 0}}, {"y", {0, 1, 0, 0, 0, 0, 0, 0}}, {"z", {0, 0, 1, 0, 0, 0, 0, 0}}}, 0.1);
  ClipScoring clip{&provider, {"x", "y", "z"}};
  const auto result = synthesize_class_images(bundle, 1, quick(30), clip);
  for (std::size_t i = 1; i < result.loss_history.size(); ++i) CHECK(result.loss_history[i] <= result.loss_history[i - 1]);
  CHECK_THROWS_AS(synthesize_class_images(bundle, 3, quick(1), clip), ValidationError);
}

TEST_CASE("synthesis argument errors") {
  ModelBundle bundle = probe_bundle();
  CHECK_THROWS_AS(synthesize_class_images(bundle, 4, quick(1)), ValidationError);
  CHECK_THROWS_AS(synthesize_class_images(bundle, -1, quick(1)), ValidationError);
  CHECK_THROWS_AS(synthesize_class_images(bundle.strip_pretrain_head(), 0, quick(1)), ValidationError);
  auto bad = quick(1);
  bad.step_size = 0.0;
  CHECK_THROWS_AS(synthesize_class_images(bundle, 0, bad), ValidationError);
  bad = quick(1);
  bad.reg.w_tv = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK(parse_synthesis_init(to_string(SynthesisInit::gaussian_noise)) == SynthesisInit::gaussian_noise);
  CHECK_THROWS_AS(parse_synthesis_init("zeros"), ValidationError);
}

TEST_CASE("synthesised dataset export") {
  trida::testing::TempDir dir("synth");
  ModelBundle bundle = probe_bundle();
  std::vector<SynthesisResult> results{synthesize_class_images(bundle, 0, quick(2)),
                                       synthesize_class_images(bundle, 1, quick(2))};
  const std::vector<std::string> names{"p", "q"};
  write_synthesized_dataset(dir.path(), names, results, quick(2));
  CHECK(std::filesystem::exists(dir.path() / "manifest.txt"));
  const auto loaded = load_image_folder(dir.path(), DomainRole::pretrain, 4);
  CHECK(loaded.size() == 6);
  CHECK(loaded.class_set() == names);
  const auto ds = synthesized_dataset(names, results);
  CHECK(ds.size() == 6);
  CHECK(ds.all_labels() == std::vector<int>{0, 0, 0, 1, 1, 1});
  CHECK_THROWS_AS(synthesized_dataset(std::vector<std::string>{"p"}, results), ValidationError);
}
