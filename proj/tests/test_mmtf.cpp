#include <gtest/gtest.h>

#include <sstream>

#include "mirrormamba/mmtf.hpp"
#include "test_util.hpp"

using namespace mm;

TEST(Mmtf, LayoutIsLittleEndian) {
  Tensor<float> t(Shape{2, 1}, std::vector<float>{1.0f, -2.0f});
  std::ostringstream os;
  write_mmtf(os, t);
  const std::string s = os.str();
  ASSERT_EQ(s.size(), mmtf_size(t.shape()));
  ASSERT_EQ(s.size(), 4u + 4 + 4 + 8 + 8);
  EXPECT_EQ(s.substr(0, 4), "MMTF");
  auto byte = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
  EXPECT_EQ(byte(4), 1);  // version
  EXPECT_EQ(byte(8), 2);  // rank
  EXPECT_EQ(byte(12), 2);
  EXPECT_EQ(byte(16), 1);
  // 1.0f = 0x3F800000
  EXPECT_EQ(byte(20), 0x00);
  EXPECT_EQ(byte(23), 0x3F);
}

TEST(Mmtf, RoundTripBitExact) {
  Rng rng(3);
  auto t = mmtest::randn<float>({3, 4, 5}, rng);
  std::stringstream ss;
  write_mmtf(ss, t);
  auto back = read_mmtf<float>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back.vec(), t.vec());
}

TEST(Mmtf, TruncationReportsOffset) {
  Tensor<float> t(Shape{4}, 1.0f);
  std::ostringstream os;
  write_mmtf(os, t);
  const std::string full = os.str();
  for (std::size_t cut : {2ul, 6ul, 13ul, full.size() - 1}) {
    std::istringstream is(full.substr(0, cut));
    try {
      read_mmtf<float>(is);
      FAIL() << "no error at cut " << cut;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
}

TEST(Mmtf, BadMagicAndVersion) {
  std::istringstream magic(std::string("XXXX\x01\0\0\0", 8));
  EXPECT_THROW(read_mmtf<float>(magic), FormatError);
  std::string v = std::string("MMTF") + std::string("\x02\0\0\0\x01\0\0\0\x01\0\0\0", 12) + std::string(4, '\0');
  std::istringstream version(v);
  try {
    read_mmtf<float>(version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}
