#include "qmri/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace qmri;

namespace {

std::filesystem::path tmp_dir() {
  auto d = std::filesystem::temp_directory_path() / "qmri_test_io";
  std::filesystem::create_directories(d);
  return d;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::numerical;
}

}  // namespace

TEST(TensorFile, IdentityLayoutAndSize) {
  const auto path = tmp_dir() / "eye.tnsr";
  write_tensor(path, tensor_from(RMatrix(RMatrix::Identity(2, 2))));
  EXPECT_EQ(std::filesystem::file_size(path), 8u + 2 + 1 + 1 + 16 + 32);
  const std::string bytes = read_bytes(path);
  EXPECT_EQ(bytes.substr(0, 8), "QMRITNSR");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);  // version, little endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[10]), 0);  // f64
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 2);
  EXPECT_EQ(to_rmatrix(read_tensor(path)), RMatrix::Identity(2, 2));
}

TEST(TensorFile, ComplexScalarExact) {
  Tensor t;
  t.dtype = DType::c128;
  t.dims = {1};
  t.cplx = {cdouble(3.0, 4.0)};
  const Tensor back = decode_tensor(encode_tensor(t));
  ASSERT_EQ(back.cplx.size(), 1u);
  EXPECT_EQ(back.cplx[0], cdouble(3.0, 4.0));
}

TEST(TensorFile, RandomRoundTripBitwise) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  for (int rep = 0; rep < 5; ++rep) {
    CMatrix m(10, 880);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = cdouble(g(rng), g(rng));
    const auto path = tmp_dir() / "rand.tnsr";
    write_tensor(path, tensor_from(m));
    const Tensor back = read_tensor(path);
    EXPECT_TRUE(back == tensor_from(m));
    EXPECT_EQ(std::memcmp(to_cmatrix(back).data(), m.data(), sizeof(cdouble) * m.size()), 0);
  }
}

TEST(TensorFile, SpecialValuesSurvive) {
  RVector v(4);
  v << -0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::denorm_min(), 1e308;
  const Tensor back = decode_tensor(encode_tensor(tensor_from(v)));
  EXPECT_TRUE(back == tensor_from(v));
  EXPECT_TRUE(std::signbit(back.real[0]));
}

TEST(TensorFile, ReadWriteIsIdentityOnBytes) {
  std::mt19937_64 rng(3);
  RMatrix m = RMatrix::Random(3, 7);
  const std::string bytes = encode_tensor(tensor_from(m));
  EXPECT_EQ(encode_tensor(decode_tensor(bytes)), bytes);
}

TEST(TensorFile, Errors) {
  const std::string good = encode_tensor(tensor_from(RMatrix(RMatrix::Ones(3, 3))));
  std::string bad = good;
  bad.replace(0, 4, "XXXX");
  EXPECT_EQ(code_of([&] { decode_tensor(bad); }), ErrorCode::bad_magic);
  EXPECT_EQ(code_of([&] { decode_tensor(good.substr(0, good.size() - 5)); }), ErrorCode::truncated);
  EXPECT_EQ(code_of([&] { decode_tensor(good.substr(0, 15)); }), ErrorCode::truncated);
  std::string v2 = good;
  v2[8] = 2;
  EXPECT_EQ(code_of([&] { decode_tensor(v2); }), ErrorCode::unsupported_version);
  EXPECT_EQ(code_of([&] { decode_tensor(good + "x"); }), ErrorCode::invalid_argument);
  Tensor zero;
  zero.dims = {0};
  EXPECT_EQ(code_of([&] { encode_tensor(zero); }), ErrorCode::invalid_argument);
  Tensor huge;
  huge.dims = {1ull << 40, 1ull << 40};
  EXPECT_EQ(code_of([&] { encode_tensor(huge); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { read_tensor(tmp_dir() / "does_not_exist.tnsr"); }), ErrorCode::io);
}

TEST(StrictObject, RejectsUnknownAndNamesKey) {
  const json j = json::parse(R"({"a_ms": 1.5, "b": {"c_count": 2, "zz": 1}})");
  StrictObject o(j, "cfg");
  EXPECT_DOUBLE_EQ(o.get<double>("a_ms"), 1.5);
  auto b = o.child("b");
  EXPECT_EQ(b.get<int>("c_count"), 2);
  try {
    b.finish();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
    EXPECT_NE(std::string(e.what()).find("cfg.b.zz"), std::string::npos);
  }
  o.finish();
}

TEST(StrictObject, TypeErrorsAreConfigErrors) {
  const json j = json::parse(R"({"n_count": 1.5, "flag": 1, "name": 3, "neg_count": -1})");
  StrictObject o(j, "x");
  EXPECT_EQ(code_of([&] { o.get<int>("n_count"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { o.get<bool>("flag"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { o.get<std::string>("name"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { o.get<std::uint64_t>("neg_count"); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { o.get<double>("missing_ms"); }), ErrorCode::config);
}

TEST(Json, ParseErrorIsConfig) {
  const auto path = tmp_dir() / "broken.json";
  write_bytes(path, "{ not json");
  EXPECT_EQ(code_of([&] { read_json(path); }), ErrorCode::config);
}
