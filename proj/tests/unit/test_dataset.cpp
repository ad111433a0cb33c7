#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "steadv/dataset.hpp"

using namespace steadv;

TEST_CASE("classification set is bit-identical across runs") {
  auto a = generate_classification_set(7, 10, 4);
  auto b = generate_classification_set(7, 10, 4);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].label == b[i].label);
    REQUIRE(a[i].image.bit_equal(b[i].image));
  }
}

TEST_CASE("classification set is class-balanced") {
  auto set = generate_classification_set(7, 100, 4);
  int hist[4] = {0, 0, 0, 0};
  for (const auto& s : set) {
    REQUIRE(s.label >= 0);
    REQUIRE(s.label < 4);
    ++hist[s.label];
  }
  for (int k = 0; k < 4; ++k) REQUIRE(hist[k] == 25);

  auto odd = generate_classification_set(7, 10, 3);
  int hist3[3] = {0, 0, 0};
  for (const auto& s : odd) ++hist3[s.label];
  REQUIRE(std::max({hist3[0], hist3[1], hist3[2]}) -
              std::min({hist3[0], hist3[1], hist3[2]}) <= 1);
}

TEST_CASE("classification pixels stay in range") {
  for (int k : {2, 8, 16}) {
    auto set = generate_classification_set(3, 2 * k, k);
    for (const auto& s : set) {
      REQUIRE(s.image.shape() == Shape{32, 32, 3});
      REQUIRE(min_value(s.image) >= 0.0f);
      REQUIRE(max_value(s.image) <= 1.0f);
    }
  }
}

TEST_CASE("generator parameter bounds") {
  REQUIRE_THROWS_AS(generate_classification_set(1, 10, 1), ConfigError);
  REQUIRE_THROWS_AS(generate_classification_set(1, 10, 17), ConfigError);
  REQUIRE_THROWS_AS(generate_classification_set(1, 0, 4), ConfigError);
  REQUIRE_THROWS_AS(generate_scene_set(1, 0, 4), ConfigError);
}

TEST_CASE("scene set is bit-identical across runs and structurally valid") {
  auto a = generate_scene_set(3, 20, 4);
  auto b = generate_scene_set(3, 20, 4);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].label == b[i].label);
    REQUIRE(a[i].background.bit_equal(b[i].background));
    REQUIRE(a[i].base_patch.bit_equal(b[i].base_patch));
    for (int c = 0; c < 4; ++c) {
      REQUIRE(a[i].billboard_corners[c].x == b[i].billboard_corners[c].x);
      REQUIRE(a[i].billboard_corners[c].y == b[i].billboard_corners[c].y);
    }
  }
}

TEST_CASE("every generated billboard quad is convex and inside bounds") {
  auto scenes = generate_scene_set(11, 50, 4);
  for (const Scene& s : scenes) {
    REQUIRE(valid_billboard_quad(s.billboard_corners, kSceneSize));
    REQUIRE(s.background.shape() == Shape{kSceneSize, kSceneSize, 3});
    REQUIRE(s.base_patch.shape() == Shape{kPatchSize, kPatchSize, 3});
    REQUIRE(min_value(s.background) >= 0.0f);
    REQUIRE(max_value(s.background) <= 1.0f);
    REQUIRE(min_value(s.base_patch) >= 0.0f);
    REQUIRE(max_value(s.base_patch) <= 1.0f);
  }
}

TEST_CASE("export writes ppm files plus a manifest") {
  namespace fs = std::filesystem;
  std::string dir = (fs::temp_directory_path() / "steadv_export_test").string();
  fs::remove_all(dir);

  auto set = generate_classification_set(5, 6, 3);
  export_classification_set(dir, set);
  std::ifstream manifest(dir + "/manifest.txt");
  REQUIRE(manifest.good());
  int lines = 0;
  std::string line;
  while (std::getline(manifest, line))
    if (!line.empty()) ++lines;
  REQUIRE(lines == 6);

  Image back = read_ppm(dir + "/img_00000.ppm");
  REQUIRE(back.same_shape(set[0].image));
  for (std::int64_t i = 0; i < back.size(); ++i)
    REQUIRE(std::fabs(back[i] - set[0].image[i]) <= 0.5f / 255 + 1e-6f);

  std::string sdir = (fs::temp_directory_path() / "steadv_export_scenes").string();
  fs::remove_all(sdir);
  auto scenes = generate_scene_set(5, 3, 4);
  export_scene_set(sdir, scenes);
  std::ifstream smanifest(sdir + "/manifest.txt");
  int srecords = 0;
  while (std::getline(smanifest, line)) {
    if (line.empty()) continue;
    ++srecords;
    std::istringstream ls(line);
    std::string fname;
    int label;
    double coord;
    ls >> fname >> label;
    int coords = 0;
    while (ls >> coord) ++coords;
    REQUIRE(coords == 8);
  }
  REQUIRE(srecords == 3);
  REQUIRE(fs::exists(sdir + "/scene_00000_patch.ppm"));
}
