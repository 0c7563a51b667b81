#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "osf/frames.hpp"
#include "osf/scenegen.hpp"
#include "oracles.hpp"

using namespace osf;

namespace {

std::vector<double> constant_image(int h, int w, double v) {
  return std::vector<double>(static_cast<size_t>(h) * w * 3, v);
}

// Poses scattered at random azimuth/elevation on an inward-facing orbit band.
std::vector<CameraPose> random_orbit(int n, uint64_t seed) {
  Pcg32 rng(seed, 13);
  std::vector<CameraPose> poses;
  for (int i = 0; i < n; ++i) {
    const double azim = rng.uniform(0.0, 2 * kPi);
    const double elev = rng.uniform(0.1, 0.8);
    const double radius = rng.uniform(2.0, 2.8);
    CameraPose p;
    p.position = radius * Vec3{std::cos(elev) * std::cos(azim), std::cos(elev) * std::sin(azim),
                               std::sin(elev)};
    p.orientation = look_at(p.position, {0, 0, 0});
    poses.push_back(p);
  }
  return poses;
}

}  // namespace

TEST_CASE("blur_score") {
  SECTION("constant image scores zero") {
    CHECK(blur_score(constant_image(8, 8, 0.37), 8, 8) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("single impulse scores positive") {
    auto img = constant_image(9, 9, 0.0);
    const size_t center = (4 * 9 + 4) * 3;
    img[center] = img[center + 1] = img[center + 2] = 1.0;
    CHECK(blur_score(img, 9, 9) > 0.0);
  }
  SECTION("checkerboard sharper than smooth gradient") {
    const int h = 16, w = 16;
    std::vector<double> checker(static_cast<size_t>(h) * w * 3), grad = checker;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double cv = ((x + y) % 2) ? 1.0 : 0.0;
        const double gv = static_cast<double>(x) / (w - 1);
        for (int k = 0; k < 3; ++k) {
          checker[(static_cast<size_t>(y) * w + x) * 3 + k] = cv;
          grad[(static_cast<size_t>(y) * w + x) * 3 + k] = gv;
        }
      }
    }
    const double sc = blur_score(checker, h, w);
    const double sg = blur_score(grad, h, w);
    CHECK(sc > sg);
    // agree with the explicit-kernel reference
    CHECK(sc == Catch::Approx(oracles::reference_laplacian_variance(checker, h, w))
                    .epsilon(1e-12)
                    .margin(1e-12));
    CHECK(sg == Catch::Approx(oracles::reference_laplacian_variance(grad, h, w))
                    .epsilon(1e-12)
                    .margin(1e-12));
  }
  SECTION("degenerate sizes rejected") {
    CHECK_THROWS_AS(blur_score(constant_image(2, 8, 0.0), 2, 8), std::invalid_argument);
  }
}

TEST_CASE("filter_blurred") {
  SECTION("fraction zero retains everything") {
    const std::vector<double> scores{3, 1, 2};
    CHECK(filter_blurred(scores, 0.0) == std::vector<int>{0, 1, 2});
  }
  SECTION("drops the 20 percent most blurred of ten") {
    std::vector<double> scores{9, 1, 8, 2, 7, 3, 6, 4, 5, 0};
    const auto kept = filter_blurred(scores, 0.2);
    CHECK(kept.size() == 8);
    // lowest two scores (0 at index 9, 1 at index 1) dropped
    CHECK(std::find(kept.begin(), kept.end(), 9) == kept.end());
    CHECK(std::find(kept.begin(), kept.end(), 1) == kept.end());
    CHECK(std::is_sorted(kept.begin(), kept.end()));
  }
  SECTION("ties retain the lower index") {
    // all tie permutations of three equal scores with one drop slot
    const std::vector<double> scores{5, 5, 5, 5};
    const auto kept = filter_blurred(scores, 0.25);
    CHECK(kept == std::vector<int>{0, 1, 2});  // highest index dropped first
    const auto kept2 = filter_blurred(scores, 0.5);
    CHECK(kept2 == std::vector<int>{0, 1});
  }
  SECTION("invalid fraction rejected") {
    CHECK_THROWS_AS(filter_blurred({1, 2}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(filter_blurred({1, 2}, -0.1), std::invalid_argument);
  }
}

TEST_CASE("pose_dissimilarity") {
  CameraPose a, b;
  a.position = b.position = {1, 2, 3};
  a.orientation = b.orientation = Quat{1, 0, 0, 0};
  SECTION("identical poses score zero") {
    CHECK(pose_dissimilarity(a, b, 2.0) == 0.0);
  }
  SECTION("opposite orientation with beta = 1 scores exactly one") {
    b.orientation = Quat{0, 1, 0, 0};  // 180 degrees about x
    CHECK(pose_dissimilarity(a, b, 2.0, 1.0) == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("symmetric") {
    Pcg32 rng(3);
    for (int i = 0; i < 20; ++i) {
      CameraPose p, q;
      p.position = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      q.position = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const Vec3 axis = rng.unit_vector();
      const double ang = rng.uniform(0, kPi);
      p.orientation = Quat{std::cos(ang / 2), std::sin(ang / 2) * axis.x,
                           std::sin(ang / 2) * axis.y, std::sin(ang / 2) * axis.z};
      q.orientation = Quat{1, 0, 0, 0};
      CHECK(pose_dissimilarity(p, q, 3.0) == Catch::Approx(pose_dissimilarity(q, p, 3.0)));
    }
  }
}

TEST_CASE("select_frames") {
  SECTION("k = N returns every index") {
    const auto poses = random_orbit(9, 1);
    auto sel = select_frames(poses, 9, 3.0);
    std::sort(sel.begin(), sel.end());
    for (int i = 0; i < 9; ++i) CHECK(sel[static_cast<size_t>(i)] == i);
  }
  SECTION("collinear positions with identical orientations pick the endpoints") {
    std::vector<CameraPose> poses;
    for (int i = 0; i < 7; ++i) {
      CameraPose p;
      p.position = {static_cast<double>(i), 0, 0};
      p.orientation = Quat{1, 0, 0, 0};
      poses.push_back(p);
    }
    auto sel = select_frames(poses, 2, 6.0);
    std::sort(sel.begin(), sel.end());
    // reference: exhaustive max-min pair search
    const auto want = oracles::best_pair(7, [&](int i, int j) {
      return pose_dissimilarity(poses[static_cast<size_t>(i)], poses[static_cast<size_t>(j)], 6.0);
    });
    CHECK(sel[0] == want.first);
    CHECK(sel[1] == want.second);
    CHECK(sel[0] == 0);
    CHECK(sel[1] == 6);
  }
  SECTION("no duplicates, deterministic") {
    const auto poses = random_orbit(30, 5);
    const auto a = select_frames(poses, 11, 3.46);
    const auto b = select_frames(poses, 11, 3.46);
    CHECK(a == b);
    auto s = a;
    std::sort(s.begin(), s.end());
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
  }
  SECTION("greedy beats uniform stride on seeded orbits") {
    int wins = 0;
    const int trials = 40;
    for (int trial = 0; trial < trials; ++trial) {
      const auto poses = random_orbit(40, 100 + static_cast<uint64_t>(trial));
      const int k = 8;
      const auto greedy = select_frames(poses, k, 3.46);
      std::vector<int> stride;
      for (int i = 0; i < k; ++i) stride.push_back(i * 40 / k);
      const double g = min_pairwise_dissimilarity(poses, greedy, 3.46);
      const double s = min_pairwise_dissimilarity(poses, stride, 3.46);
      if (g >= s - 1e-12) ++wins;
    }
    CHECK(wins >= trials * 95 / 100);
  }
  SECTION("a richer candidate pool never lowers the achievable min-dissimilarity") {
    // exhaustive max-min over all k-subsets; monotone in the candidate pool
    auto brute_opt = [](const std::vector<CameraPose>& poses, int k) {
      const int n = static_cast<int>(poses.size());
      std::vector<int> idx(static_cast<size_t>(k));
      double best = -1.0;
      std::function<void(int, int)> rec = [&](int start, int depth) {
        if (depth == k) {
          best = std::max(best, min_pairwise_dissimilarity(poses, idx, 3.46));
          return;
        }
        for (int i = start; i < n; ++i) {
          idx[static_cast<size_t>(depth)] = i;
          rec(i + 1, depth + 1);
        }
      };
      rec(0, 0);
      return best;
    };
    for (uint64_t seed = 0; seed < 10; ++seed) {
      const auto big = random_orbit(14, 1000 + seed);
      const std::vector<CameraPose> small(big.begin(), big.begin() + 10);
      const int k = 4;
      const double opt_small = brute_opt(small, k);
      const double opt_big = brute_opt(big, k);
      CHECK(opt_big >= opt_small - 1e-12);
      // greedy stays within the classic 1/2 bound of the optimum
      const double g = min_pairwise_dissimilarity(big, select_frames(big, k, 3.46), 3.46);
      CHECK(g >= 0.5 * opt_big - 1e-12);
    }
  }
  SECTION("k out of range rejected") {
    const auto poses = random_orbit(4, 2);
    CHECK_THROWS_AS(select_frames(poses, 5, 3.0), std::invalid_argument);
    CHECK_THROWS_AS(select_frames(poses, 0, 3.0), std::invalid_argument);
  }
}
