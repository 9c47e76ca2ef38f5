#include <filesystem>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "vitlens/container.hpp"

using namespace vitlens;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> raw(const json& manifest, std::size_t payload_bytes) {
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kContainerMagic.begin(), kContainerMagic.end());
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(std::uint64_t(text.size()) >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.resize(out.size() + payload_bytes, 0);
  return out;
}

json tensor(const std::string& name, json shape, std::size_t offset, std::size_t length,
            const char* dtype = "f32") {
  return {{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", offset},
          {"length", length}};
}

json manifest(json tensors) {
  return {{"format_version", 1}, {"metadata", json::object()}, {"tensors", tensors}};
}

ErrorCode code_of(const std::vector<std::uint8_t>& bytes, std::string* message = nullptr) {
  try {
    parse_container(bytes);
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.code();
  }
  ADD_FAILURE() << "container loaded";
  return ErrorCode::io;
}

std::filesystem::path temp_path(const std::string& leaf) {
  return std::filesystem::temp_directory_path() / ("vitlens_test_" + leaf);
}

}  // namespace

TEST(Container, SingleTensorRoundTripsThroughFile) {
  TensorContainer c;
  c.add_f32("a", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  c.metadata["k"] = "v";
  const auto path = temp_path("a.vtns");
  write_container(c, path);
  const TensorContainer back = read_container(path);
  EXPECT_EQ(back.get_f32("a"), Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(back.meta("k"), "v");
  EXPECT_EQ(serialize_container(back), serialize_container(c));
  std::filesystem::remove(path);
}

TEST(Container, RandomContainersRoundTripBitExact) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(1, 5), count(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    TensorContainer c;
    const int n = count(rng);
    for (int t = 0; t < n; ++t) {
      Shape s(std::size_t(dim(rng) % 3 + 1));
      for (auto& v : s) v = std::size_t(dim(rng));
      if (t % 2) {
        std::vector<std::int32_t> vals(shape_numel(s));
        for (auto& v : vals) v = std::int32_t(rng());
        c.add_i32("t" + std::to_string(t), s, vals);
      } else {
        c.add_f32("t" + std::to_string(t), fixtures::random_tensor(s, rng));
      }
    }
    c.metadata["trial"] = std::to_string(trial);
    const auto bytes = serialize_container(c);
    const TensorContainer back = parse_container(bytes);
    ASSERT_EQ(back.entries().size(), c.entries().size());
    for (std::size_t i = 0; i < c.entries().size(); ++i) {
      EXPECT_EQ(back.entries()[i].name, c.entries()[i].name);
      EXPECT_EQ(back.entries()[i].shape, c.entries()[i].shape);
      EXPECT_EQ(back.entries()[i].dtype, c.entries()[i].dtype);
      EXPECT_EQ(back.entries()[i].bytes, c.entries()[i].bytes);
    }
    EXPECT_EQ(serialize_container(back), bytes);
  }
}

TEST(Container, TruncatedPayloadIsOverrun) {
  TensorContainer c;
  c.add_f32("a", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto bytes = serialize_container(c);
  bytes.pop_back();
  std::string msg;
  EXPECT_EQ(code_of(bytes, &msg), ErrorCode::payload_overrun);
  EXPECT_EQ(msg, "payload overrun: a");
}

TEST(Container, DistinctErrorPerViolation) {
  auto good = raw(manifest({tensor("a", {2}, 0, 8)}), 8);
  EXPECT_NO_THROW(parse_container(good));

  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(code_of(magic), ErrorCode::bad_magic);

  auto text = raw(manifest({tensor("a", {2}, 0, 8)}), 8);
  text[14] = '!';
  EXPECT_EQ(code_of(text), ErrorCode::manifest_parse);

  json v2 = manifest(json::array());
  v2["format_version"] = 2;
  EXPECT_EQ(code_of(raw(v2, 0)), ErrorCode::bad_version);

  EXPECT_EQ(code_of(raw(manifest({tensor("a", {2}, 0, 16, "f64")}), 16)), ErrorCode::bad_dtype);

  std::string msg;
  EXPECT_EQ(code_of(raw(manifest({tensor("b", {3}, 0, 8)}), 12), &msg),
            ErrorCode::length_mismatch);
  EXPECT_NE(msg.find("b"), std::string::npos);

  EXPECT_EQ(code_of(raw(manifest({tensor("z", {0}, 0, 0)}), 0)), ErrorCode::length_mismatch);

  EXPECT_EQ(code_of(raw(manifest({tensor("a", {2}, 0, 8), tensor("a", {2}, 8, 8)}), 16)),
            ErrorCode::duplicate_name);

  EXPECT_EQ(code_of(raw(manifest({tensor("a", {2}, 0, 8), tensor("b", {2}, 4, 8)}), 16), &msg),
            ErrorCode::overlap);
  EXPECT_NE(msg.find("a"), std::string::npos);

  EXPECT_EQ(code_of(raw(manifest({tensor("a", {2}, 4, 8)}), 8)), ErrorCode::payload_overrun);

  auto short_header = good;
  short_header.resize(10);
  EXPECT_EQ(code_of(short_header), ErrorCode::bad_magic);

  auto long_manifest = good;
  long_manifest[6] = 0xff;
  long_manifest[7] = 0xff;
  EXPECT_EQ(code_of(long_manifest), ErrorCode::manifest_parse);
}

TEST(Container, TruncationFuzzNeverLoadsSilently) {
  TensorContainer c;
  c.add_f32("a", Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  c.add_i32("b", {2}, std::vector<std::int32_t>{7, 8});
  const auto bytes = serialize_container(c);
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + std::ptrdiff_t(len));
    EXPECT_THROW(parse_container(cut), Error) << "length " << len;
  }
}

TEST(Container, ManifestByteFlipsAreDetectedOrHarmless) {
  TensorContainer c;
  c.add_f32("a", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const auto bytes = serialize_container(c);
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= std::uint64_t(bytes[6 + i]) << (8 * i);
  std::mt19937_64 rng(4);
  for (std::size_t pos = 0; pos < 14 + mlen; ++pos) {
    auto bad = bytes;
    bad[pos] ^= std::uint8_t(1u << (rng() % 8));
    try {
      const TensorContainer back = parse_container(bad);
      // A surviving flip must still describe a self-consistent container.
      for (const auto& e : back.entries()) EXPECT_EQ(e.bytes.size(), e.numel() * 4);
    } catch (const Error&) {
    }
  }
}

TEST(Container, DuplicateAddAndMissingTensor) {
  TensorContainer c;
  c.add_f32("a", Tensor({1}));
  EXPECT_THROW(c.add_f32("a", Tensor({1})), Error);
  EXPECT_THROW(c.get_f32("nope"), Error);
  c.add_i32("i", {1}, std::vector<std::int32_t>{3});
  EXPECT_THROW(c.get_f32("i"), Error);
}

TEST(Container, MissingFileIsIoError) {
  try {
    read_container("/nonexistent/path.vtns");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io);
  }
}
