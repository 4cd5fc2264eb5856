#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <limits>

#include "mcdit/checkpoint.hpp"

using namespace mcdit;
namespace fs = std::filesystem;

namespace {

ParamStore<float> sample_store() {
  Rng rng(21);
  ParamStore<float> s;
  s.add("z.last", Tensor::randn({3, 5}, rng), true);
  s.add("a.first", Tensor({4}, {0.0f, -0.0f, 1e-38f, 3.4e38f}), false);
  s.add("m.cube", Tensor::randn({2, 2, 2}, rng), true);
  return s;
}

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mcdit_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, LayoutStartsWithMagicVersionAndCount) {
  const auto bytes = encode_checkpoint(sample_store());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MCDT");
  std::uint32_t version = 0, count = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 4);
  EXPECT_EQ(version, kCheckpointVersion);
  EXPECT_EQ(count, 3u);
  // first entry is the lexicographically smallest name
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 12, 4);
  EXPECT_EQ(std::string(bytes.data() + 16, len), "a.first");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto original = sample_store();
  const auto path = temp_file("round.ckpt");
  save_checkpoint(original, path);
  const auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.names(), original.names());
  for (const auto& name : original.names()) {
    EXPECT_EQ(loaded.get(name).shape(), original.get(name).shape()) << name;
    EXPECT_TRUE(bit_equal(loaded.get(name), original.get(name))) << name;
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto a = temp_file("a.ckpt");
  const auto b = temp_file("b.ckpt");
  save_checkpoint(sample_store(), a);
  save_checkpoint(load_checkpoint(a), b);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(a)), encode_checkpoint(load_checkpoint(b)));
  EXPECT_EQ(fs::file_size(a), fs::file_size(b));
}

TEST(Checkpoint, LoadedEntriesAreFrozen) {
  const auto loaded = decode_checkpoint(encode_checkpoint(sample_store()));
  EXPECT_EQ(loaded.trainable_numel(), 0u);
}

TEST(Checkpoint, BadMagicIsFormatError) {
  auto bytes = encode_checkpoint(sample_store());
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, TruncationIsFormatError) {
  const auto bytes = encode_checkpoint(sample_store());
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<char> partial(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_checkpoint(partial), FormatError) << cut;
  }
}

TEST(Checkpoint, TrailingBytesAreFormatError) {
  auto bytes = encode_checkpoint(sample_store());
  bytes.push_back(0);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, MissingFileIsFormatError) {
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.ckpt")), FormatError);
}

TEST(Checkpoint, NonFiniteParameterIsRefused) {
  auto s = sample_store();
  s.get("m.cube").mutable_data()[3] = std::numeric_limits<float>::infinity();
  const auto path = temp_file("nan.ckpt");
  fs::remove(path);
  EXPECT_THROW(save_checkpoint(s, path), NumericError);
  EXPECT_FALSE(fs::exists(path));
}
