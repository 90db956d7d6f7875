#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "advxl/data.hpp"

using namespace advxl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("advxl_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

std::string tiny_ppm(std::uint8_t v) {
  DecodedImage img{3, 2, 2, std::vector<std::uint8_t>(12, v)};
  return encode_ppm(img);
}

int error_line(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.line();
  }
  return -1;
}

}  // namespace

TEST_CASE("manifest round trip") {
  DatasetManifest m;
  m.class_names = synth_class_names(10);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i)
    m.records.push_back({"s" + std::to_string(i), "img/" + std::to_string(i) + ".ppm", "",
                         static_cast<int>(rng.below(10)), std::nullopt});
  const auto text = m.serialize();
  const auto back = DatasetManifest::parse(text, "", nullptr, false);
  CHECK(back == m);
  CHECK(back.serialize() == text);

  DatasetManifest cap;
  cap.mode = DatasetMode::captioned;
  cap.class_names = {"a", "b"};
  cap.records.push_back({"x", "", base64_encode(tiny_ppm(3)), std::nullopt, std::string("a photo of a")});
  CHECK(DatasetManifest::parse(cap.serialize(), "", nullptr, false) == cap);
}

TEST_CASE("empty manifest") {
  DatasetManifest m;
  m.class_names = {"a"};
  const auto back = DatasetManifest::parse(m.serialize(), "", nullptr, false);
  CHECK(back.records.empty());
  const Dataset d = decode_dataset(back, 16);
  CHECK(d.size() == 0);
  BatchStream s(d, 4, 0, {});
  CHECK(s.batches_per_epoch() == 0);
}

TEST_CASE("manifest validation names the line") {
  const std::string header = R"({"mode": "labeled", "classes": ["a", "b", "c"]})";
  CHECK(error_line([&] {
          DatasetManifest::parse(header + "\n" + R"({"id": "1", "path": "p.ppm", "label": 1})" + "\n" +
                                     R"({"id": "2", "path": "q.ppm", "label": 3})" + "\n",
                                 "", nullptr, false);
        }) == 3);
  CHECK(error_line([&] {
          DatasetManifest::parse(header + "\n" + R"({"id": "1", "path": "p.ppm", "label": 1})" + "\n" +
                                     R"({"id": "1", "path": "q.ppm", "label": 2})" + "\n",
                                 "", nullptr, false);
        }) == 3);
  CHECK(error_line([&] {
          DatasetManifest::parse(header + "\n" + R"({"id": "1", "path": "p.ppm", "caption_key": "x"})" + "\n", "",
                                 nullptr, false);
        }) == 2);
  const auto dir = scratch("missing");
  CHECK(error_line([&] {
          DatasetManifest::parse(header + "\n" + R"({"id": "1", "path": "nope.ppm", "label": 0})" + "\n",
                                 dir.string(), nullptr, true);
        }) == 2);
  const auto table = stub_text_embeddings({"k1"}, 8, 0);
  const std::string cap = R"({"mode": "captioned", "classes": ["a"]})";
  CHECK(error_line([&] {
          DatasetManifest::parse(cap + "\n" + R"({"id": "1", "inline_ppm": "", "caption_key": "k2"})" + "\n", "",
                                 &table, false);
        }) == 2);
}

TEST_CASE("manifest load from disk and decoding") {
  const auto dir = scratch("disk");
  write_file(dir / "a.ppm", tiny_ppm(255));
  write_file(dir / "b.ppm", tiny_ppm(0));
  write_file(dir / "bad.ppm", "not an image");
  write_file(dir / "m.jsonl", std::string(R"({"mode": "labeled", "classes": ["x", "y"]})") + "\n" +
                                  R"({"id": "a", "path": "a.ppm", "label": 0})" + "\n" +
                                  R"({"id": "b", "path": "b.ppm", "label": 1})" + "\n" +
                                  R"({"id": "c", "path": "bad.ppm", "label": 1})" + "\n");
  const auto m = DatasetManifest::load((dir / "m.jsonl").string());
  CHECK(m.records.size() == 3);
  const Dataset d = decode_dataset(m, 4);
  CHECK(d.size() == 2);
  CHECK(d.skipped == 1);
  const auto imgs = d.images(std::vector<int>{0, 1});
  for (int i = 0; i < 48; ++i) CHECK(imgs.data[static_cast<std::size_t>(i)] == 1.0f);
  for (int i = 48; i < 96; ++i) CHECK(imgs.data[static_cast<std::size_t>(i)] == 0.0f);
  CHECK_THROWS_AS(DatasetManifest::load((dir / "absent.jsonl").string()), DataError);
}

TEST_CASE("pnm and base64 codecs") {
  DecodedImage img{3, 3, 2, {}};
  for (int i = 0; i < 18; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 13));
  const auto back = decode_pnm(encode_ppm(img));
  CHECK(back.pixels == img.pixels);
  CHECK(back.height == 3);
  CHECK(back.width == 2);
  for (std::string s : {"", "a", "ab", "abc", "hello world\n\x01\xff"}) CHECK(base64_decode(base64_encode(s)) == s);
  CHECK(base64_encode("Man") == "TWFu");
  CHECK_THROWS(decode_pnm("P6\n2 2\n255\n\x01"));
}

TEST_CASE("batch stream arithmetic and determinism") {
  SynthConfig cfg;
  cfg.count = 1000;
  cfg.resolution = 16;
  const Dataset d = make_synthetic_dataset(cfg);
  BatchStream s(d, 128, 5, {});
  CHECK(s.batches_per_epoch() == 7);
  std::set<int> seen;
  for (int b = 0; b < 7; ++b) {
    const auto batch = s.batch(0, b);
    CHECK(batch.images.n == 128);
    CHECK(batch.labels.size() == 128);
  }
  const auto order = s.epoch_order(0);
  seen.insert(order.begin(), order.end());
  CHECK(seen.size() == 1000);
  CHECK(s.epoch_order(0) == BatchStream(d, 128, 5, {}).epoch_order(0));
  CHECK(s.epoch_order(0) != s.epoch_order(1));
  CHECK(s.epoch_order(0) != BatchStream(d, 128, 6, {}).epoch_order(0));
  CHECK(s.at_step(9).images == s.batch(1, 2).images);
  CHECK(s.at_step(9).labels == s.batch(1, 2).labels);
  for (float v : s.batch(0, 0).images.data) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("batch stream applies the reduction") {
  SynthConfig cfg;
  cfg.count = 64;
  cfg.resolution = 32;
  const Dataset d = make_synthetic_dataset(cfg);
  ReductionSpec resize;
  resize.strategy = ReductionStrategy::resize;
  resize.patch_size = 4;
  resize.target_resolution = 16;
  BatchStream s(d, 16, 1, resize);
  CHECK(s.input_resolution() == 16);
  const auto b = s.batch(0, 0);
  CHECK(b.images.height == 16);
  CHECK(b.images.width == 16);
  ReductionSpec mask;
  mask.strategy = ReductionStrategy::random_mask;
  mask.patch_size = 4;
  mask.mask_ratio = 0.75;
  const auto m = BatchStream(d, 16, 1, mask).batch(0, 0);
  CHECK(m.images.height == 32);
  REQUIRE(m.selections.size() == 16);
  for (const auto& sel : m.selections) CHECK(sel.size() == 16);
  CHECK(m.selections[0] == BatchStream(d, 16, 1, mask).batch(0, 0).selections[0]);
}

TEST_CASE("captioned batches carry text rows and no labels") {
  SynthConfig cfg;
  cfg.count = 100;
  cfg.resolution = 16;
  cfg.captioned = true;
  const Dataset d = make_synthetic_dataset(cfg);
  std::vector<std::string> caps;
  for (const auto& n : d.class_names) caps.push_back(caption_for(n));
  const auto table = stub_text_embeddings(caps, 16, 0);
  BatchStream s(d, 10, 3, {}, &table);
  for (int b = 0; b < s.batches_per_epoch(); ++b) {
    const auto batch = s.batch(0, b);
    CHECK(batch.labels.empty());
    CHECK(batch.text_rows.size() == 10);
    for (int r : batch.text_rows) CHECK((r >= 0 && r < table.size()));
  }
  CHECK_THROWS(BatchStream(d, 10, 3, {}));
}

TEST_CASE("stub text embeddings") {
  std::vector<std::string> caps;
  for (int i = 0; i < 1000; ++i) caps.push_back("caption number " + std::to_string(i));
  const auto t = stub_text_embeddings(caps, 64, 42);
  CHECK(t.size() == 1000);
  double total = 0;
  long pairs = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = t.row(i);
    double n = 0;
    for (float v : a) n += double(v) * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    for (int j = i + 1; j < 1000; ++j) {
      const auto b = t.row(j);
      double c = 0;
      for (int k = 0; k < 64; ++k) c += double(a[k]) * b[k];
      total += std::abs(c);
      ++pairs;
    }
  }
  CHECK(total / pairs < 0.2);
  // a caption's vector does not depend on the other captions
  const auto solo = stub_text_embeddings({"caption number 7"}, 64, 42);
  CHECK(std::equal(solo.row(0).begin(), solo.row(0).end(), t.row("caption number 7").begin()));
  try {
    stub_text_embeddings({"x", "y", "x"}, 8, 0);
    FAIL("duplicates accepted");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("x") != std::string::npos);
  }
}

TEST_CASE("text table cache round trip") {
  const auto dir = scratch("teb");
  const auto t = stub_text_embeddings({"alpha", "beta", "gamma"}, 5, 1);
  t.save((dir / "t.teb").string());
  const auto back = TextEmbeddingTable::load((dir / "t.teb").string());
  CHECK(back.keys() == t.keys());
  CHECK(back.data() == t.data());
  CHECK(back.checksum() == t.checksum());
  CHECK(back.provenance() == TextEmbeddingTable::Provenance::file);
  std::ifstream f(dir / "t.teb", std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  CHECK(std::string(magic, 4) == "TEB1");
}

TEST_CASE("synthetic data is deterministic and shares classes across splits") {
  SynthConfig a;
  a.count = 50;
  a.seed = 1;
  SynthConfig b = a;
  b.seed = 2;
  const Dataset da = make_synthetic_dataset(a), da2 = make_synthetic_dataset(a), db = make_synthetic_dataset(b);
  CHECK(da.pixels == da2.pixels);
  CHECK(da.pixels != db.pixels);
  CHECK(da.class_names == db.class_names);
  for (int i = 0; i < da.size(); ++i) CHECK((da.labels[static_cast<std::size_t>(i)] >= 0 && da.labels[static_cast<std::size_t>(i)] < 10));
  const auto sub = da.subset(20, 3);
  CHECK(sub.size() == 20);
  CHECK(sub == da.subset(20, 3));
  CHECK(std::set<int>(sub.begin(), sub.end()).size() == 20);
}
