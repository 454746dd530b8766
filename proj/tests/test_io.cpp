#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nexop/io.hpp"
#include "oracles.hpp"

using namespace nexop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "nexop_test_io";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Nxt, RealRoundTripIsBitExact) {
  const Tensor t = oracle::random_tensor({3, 4, 5}, 1);
  io::write_nxt(scratch("a.nxt"), t);
  const Tensor back = io::read_nxt(scratch("a.nxt")).to_tensor();
  EXPECT_TRUE(back == t);
}

TEST(Nxt, HeaderLayout) {
  const auto bytes = io::encode_nxt({{2, 3}, io::DType::F64, std::vector<double>(6, 1.0)});
  ASSERT_EQ(bytes.size(), 4u + 4 + 8 + 4 + 48);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NXT1");
  EXPECT_EQ(bytes[4], 2);  // ndims, little-endian
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 3);
  EXPECT_EQ(bytes[16], 0);  // dtype
  // 1.0 = 0x3FF0000000000000, little-endian.
  EXPECT_EQ(bytes[20 + 7], 0x3F);
  EXPECT_EQ(bytes[20 + 6], 0xF0);
}

TEST(Nxt, ComplexRoundTrip) {
  const Tensor planar = oracle::random_tensor({3, 2, 4, 4}, 2);
  io::write_nxt_complex(scratch("c.nxt"), planar);
  const io::NxtArray a = io::read_nxt(scratch("c.nxt"));
  EXPECT_EQ(a.dtype, io::DType::C64Pair);
  EXPECT_EQ(a.shape, (Shape{3, 4, 4}));
  EXPECT_TRUE(a.to_planar() == planar);
}

TEST(Nxt, BadMagicIsRejected) {
  auto bytes = io::encode_nxt({{2}, io::DType::F64, {1.0, 2.0}});
  bytes[0] = 'X';
  EXPECT_THROW(io::decode_nxt(bytes), FormatError);
}

TEST(Nxt, TruncatedPayloadReportsOffset) {
  auto bytes = io::encode_nxt({{4}, io::DType::F64, {1.0, 2.0, 3.0, 4.0}});
  bytes.resize(bytes.size() - 5);
  try {
    io::decode_nxt(bytes, "t.nxt");
    FAIL() << "expected an error";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated"), std::string::npos);
    EXPECT_NE(msg.find("byte offset 16"), std::string::npos) << msg;
  }
}

TEST(Nxt, UnknownDtypeAndTrailingBytes) {
  auto bytes = io::encode_nxt({{1}, io::DType::F64, {1.0}});
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(io::decode_nxt(extra), FormatError);
  bytes[12] = 7;
  EXPECT_THROW(io::decode_nxt(bytes), FormatError);
}

TEST(Nxt, WrongKindConversionThrows) {
  const io::NxtArray real{{2}, io::DType::F64, {1.0, 2.0}};
  EXPECT_THROW(real.to_planar(), FormatError);
  const io::NxtArray cpx{{1, 1}, io::DType::C64Pair, {1.0, 2.0}};
  EXPECT_THROW(cpx.to_tensor(), FormatError);
}

TEST(Pgm, RoundTripQuantizesTo255Levels) {
  Tensor img({3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / 11.0;
  io::write_pgm(scratch("a.pgm"), img, 1.0);
  const Tensor back = io::read_pgm(scratch("a.pgm"));
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255 + 1e-12);
}

TEST(Pgm, BinaryMaskIsZeroOr255) {
  Tensor m({2, 2}, std::vector<double>{0, 1, 1, 0});
  io::write_pgm(scratch("m.pgm"), m, 1.0);
  std::ifstream in(scratch("m.pgm"), std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all.substr(0, 11), "P5\n2 2\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(all[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(all[12]), 255);
}
