#include <doctest.h>

#include <cmath>

#include "phub/error.hpp"
#include "phub/worker.hpp"

using namespace phub;

namespace {

// Reference generator written out independently of the library.
float lcg_draw(std::uint64_t& state) {
  state = state * 6364136223846793005ull + 1442695040888963407ull;
  return static_cast<float>(state >> 40) / 8388608.0f - 1.0f;
}

}  // namespace

TEST_CASE("synthetic dataset follows the documented generator") {
  const auto d = synthetic_dataset(1, 4, 2);
  std::uint64_t state = 1;
  std::vector<float> w(2);
  for (auto& v : w) v = lcg_draw(state);
  CHECK(d.hyperplane == w);
  for (std::size_t i = 0; i < 4; ++i) {
    float dot = 0.0f;
    for (std::size_t j = 0; j < 2; ++j) {
      const float x = lcg_draw(state);
      CHECK(d.features[i * 2 + j] == x);
      dot += x * w[j];
    }
    CHECK(d.labels[i] == (dot > 0.0f ? 1.0f : 0.0f));
  }
  CHECK(synthetic_dataset(1, 4, 2) == d);
  CHECK_FALSE(synthetic_dataset(2, 4, 2) == d);
}

TEST_CASE("frozen labels for seed 1") {
  // Captured from the generator; guards against silent changes.
  const auto d = synthetic_dataset(1, 8, 2);
  const std::vector<float> labels(d.labels.begin(), d.labels.end());
  CHECK(labels == std::vector<float>{0, 0, 0, 0, 0, 0, 1, 1});
  CHECK(d.hyperplane[0] == -0x1.3a891p-3f);
  CHECK(d.hyperplane[1] == 0x1.3443p-6f);
}

TEST_CASE("worker slices partition the samples") {
  const auto d = synthetic_dataset(3, 12, 2);
  for (std::uint32_t w = 0; w < 4; ++w) {
    const auto s = worker_slice(d, w, 4);
    CHECK(s.samples() == 3);
    CHECK(s.features.data() == d.features.data() + w * 6);
  }
  CHECK_THROWS_AS(worker_slice(d, 0, 5), Error);
}

TEST_CASE("logistic gradient matches finite differences of the loss") {
  const auto d = synthetic_dataset(5, 64, 3);
  const std::vector<float> w = {0.3f, -0.2f, 0.1f};
  const auto g = logreg_gradient(w, view(d));
  for (std::size_t j = 0; j < 3; ++j) {
    const double h = 1e-3;
    // Evaluate the loss in double at perturbed double weights.
    auto loss_at = [&](double delta) {
      double total = 0.0;
      for (std::size_t i = 0; i < d.samples; ++i) {
        double z = 0.0;
        for (std::size_t k = 0; k < 3; ++k) z += (w[k] + (k == j ? delta : 0.0)) * d.features[i * 3 + k];
        total += std::log1p(std::exp(-std::fabs(z))) + std::max(z, 0.0) - d.labels[i] * z;
      }
      return total / d.samples;
    };
    const double numeric = (loss_at(h) - loss_at(-h)) / (2 * h);
    CHECK(g[j] == doctest::Approx(numeric).epsilon(1e-3));
  }
  CHECK(logistic_loss(std::vector<float>(3, 0.0f), view(d)) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("sigmoid saturates without overflow") {
  CHECK(sigmoid(0.0f) == 0.5f);
  CHECK(sigmoid(-200.0f) == 0.0f);
  CHECK(sigmoid(200.0f) == 1.0f);
}

TEST_CASE("zero-compute gradients are constant per iteration") {
  CHECK(zero_compute_value(0) == 0.0f);
  CHECK(zero_compute_value(8) == 1e-3f);
  const std::uint64_t elems[] = {5, 3};
  const auto chunks = partition_model(build_model_spec(elems), 8);
  const auto g = zero_compute_gradients(chunks, 3);
  REQUIRE(g.size() == chunks.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g[i].size() == chunks[i].element_count);
    for (float v : g[i]) CHECK(v == 3e-3f);
  }
}

TEST_CASE("logreg layout splits the weights into at most four keys") {
  CHECK(logreg_model_spec(16).key_count() == 4);
  CHECK(logreg_model_spec(16).keys[0].element_count == 4);
  CHECK(logreg_model_spec(2).key_count() == 2);
  CHECK(logreg_model_spec(7).total_elements() == 7);
}

TEST_CASE("worker config validation") {
  WorkerConfig c;
  c.spec = logreg_model_spec(4);
  c.dim = 4;
  c.samples = 8;
  c.worker_count = 2;
  c.worker_id = 1;
  CHECK_NOTHROW(validate(c));
  c.worker_id = 2;
  CHECK_THROWS_AS(validate(c), Error);
  c.worker_id = 0;
  c.samples = 7;
  CHECK_THROWS_AS(validate(c), Error);
  c.samples = 8;
  c.dim = 5;
  CHECK_THROWS_AS(validate(c), Error);
}
