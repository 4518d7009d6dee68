// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <random>

#include "crd/checkpoint.hpp"
#include "crd/format.hpp"
#include "crd/inference.hpp"
#include "test_util.hpp"

namespace crd {
namespace {

using testing::random_prompt;
using testing::small_config;

CRDRecord random_record(std::mt19937_64& rng, DType dtype) {
  std::uniform_int_distribution<int> small(1, 4);
  std::normal_distribution<float> val(0.0f, 1.0f);
  KVCache<float> c;
  c.prompt_length = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
  c.next_position = c.prompt_length;
  c.n_kv_heads = small(rng);
  c.d_head = 2 * small(rng);
  c.layers.resize(small(rng));
  for (auto& lc : c.layers) {
    for (std::uint32_t p = 0; p + 1 < c.prompt_length; ++p)
      if (rng() % 2) lc.positions.push_back(p);
    lc.positions.push_back(static_cast<std::uint32_t>(c.prompt_length - 1));
    const float mag = std::exp(std::uniform_real_distribution<float>(-4.0f, 4.0f)(rng));
    for (std::size_t i = 0; i < lc.size() * c.kv_dim(); ++i) {
      lc.keys.push_back(mag * val(rng));
      lc.values.push_back(rng() % 17 == 0 ? 0.0f : mag * val(rng));
    }
  }
  std::vector<float> h(std::uniform_int_distribution<std::size_t>(1, 40)(rng));
  for (auto& v : h) v = val(rng);
  std::string id = "item-" + std::to_string(rng() % 100000);
  std::string y = testing::random_text(rng, 0, 12, "abcXYZ 019\xc3\xa9");
  return make_record(id, c, h, y, dtype);
}

TEST(Half, RoundTripIsIdempotent) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(0.0f, 100.0f);
  for (int i = 0; i < 10000; ++i) {
    const float x = d(rng) * (i % 3 == 0 ? 1e-6f : 1.0f);
    const float once = half_to_float(float_to_half(x));
    EXPECT_EQ(once, half_to_float(float_to_half(once)));
    if (std::fabs(x) > 1e-4f && std::fabs(x) < 60000.0f) {
      EXPECT_NEAR(once, x, std::fabs(x) * 1e-3f);
    }
  }
  EXPECT_EQ(half_to_float(float_to_half(1.0f)), 1.0f);
  EXPECT_EQ(float_to_half(65504.0f), 0x7bffu);
  EXPECT_EQ(float_to_half(1e6f), 0x7c00u);
  EXPECT_EQ(half_to_float(0x0001u), std::ldexp(1.0f, -24));
}

TEST(Record, RoundTripAllDtypes) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 300; ++i) {
    const auto dtype = static_cast<DType>(i % 3);
    const CRDRecord r = random_record(rng, dtype);
    const Bytes b = encode_record(r);
    const CRDRecord back = decode_record(b);
    ASSERT_EQ(back, r) << "iteration " << i << " dtype " << to_string(dtype);
    EXPECT_EQ(encode_record(back), b);
  }
}

TEST(Record, F32IsBitExactWithoutProjection) {
  std::mt19937_64 rng(5);
  CRDRecord r = random_record(rng, DType::kF32);
  r.h[0] = std::nextafter(1.0f, 2.0f);
  EXPECT_EQ(decode_record(encode_record(r)), r);
}

TEST(Record, ProjectionMatchesDecode) {
  std::mt19937_64 rng(6);
  CRDRecord r = random_record(rng, DType::kF16);
  for (auto& v : r.h) v = v * 1.2345678f;  // off-grid now
  EXPECT_EQ(decode_record(encode_record(r)), project_record(r));
  EXPECT_NE(project_record(r), r);
}

TEST(Record, EverySingleByteFlipIsCorruption) {
  std::mt19937_64 rng(8);
  const Bytes b = encode_record(random_record(rng, DType::kQ8));
  for (std::size_t i = 0; i < b.size(); ++i) {
    Bytes bad = b;
    bad[i] ^= 0x10;
    try {
      decode_record(bad);
      FAIL() << "flip at byte " << i << " not detected";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kCorruption) << "byte " << i;
    }
  }
}

TEST(Record, ScaleCountMismatchIsFormatError) {
  std::mt19937_64 rng(9);
  CRDRecord r = random_record(rng, DType::kQ8);
  r.scales.pop_back();
  try {
    encode_record(r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
  }
  CRDRecord f = random_record(rng, DType::kF32);
  f.scales = {1.0f};
  EXPECT_THROW(encode_record(f), Error);
}

TEST(File, RoundTripAndErrors) {
  std::mt19937_64 rng(12);
  CRDFile f;
  for (std::size_t i = 0; i < f.fingerprint.size(); ++i) f.fingerprint[i] = static_cast<std::uint8_t>(i * 7);
  for (int i = 0; i < 20; ++i) f.records.push_back(random_record(rng, static_cast<DType>(i % 3)));
  const Bytes b = encode_file(f);
  EXPECT_EQ(decode_file(b), f);

  auto kind_of = [](const Bytes& bytes) {
    try {
      decode_file(bytes);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;  // sentinel: no error
  };
  Bytes bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of(bad_magic), ErrorKind::kFormat);
  Bytes bad_version = b;
  bad_version[4] = 9;
  EXPECT_EQ(kind_of(bad_version), ErrorKind::kVersion);
  for (std::size_t i = 6; i < b.size(); i += 13) {
    Bytes flip = b;
    flip[i] ^= 1;
    EXPECT_EQ(kind_of(flip), ErrorKind::kCorruption) << "byte " << i;
  }
  Bytes truncated(b.begin(), b.begin() + 20);
  EXPECT_NE(kind_of(truncated), ErrorKind::kIo);

  CRDFile empty;
  EXPECT_EQ(decode_file(encode_file(empty)), empty);
}

TEST(File, OffsetsStrictlyIncrease) {
  std::mt19937_64 rng(13);
  CRDFile f;
  for (int i = 0; i < 5; ++i) f.records.push_back(random_record(rng, DType::kF16));
  const Bytes b = encode_file(f);
  ByteReader rd(b);
  rd.bytes(4 + 2 + 32);
  ASSERT_EQ(rd.u32(), 5u);
  std::uint64_t prev = 0;
  for (int i = 0; i < 5; ++i) {
    const auto o = rd.u64();
    EXPECT_GT(o, prev);
    prev = o;
  }
}

TEST(Quantize, F32IsIdentity) {
  const auto p = init_model<float>(small_config());
  auto pre = prefill(p, encode_text("hello there"));
  EXPECT_EQ(quantize_cache(pre.cache, DType::kF32).cache, pre.cache);
}

TEST(Quantize, Q8ErrorWithinHalfScale) {
  const auto p = init_model<float>(small_config());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    auto pre = prefill(p, random_prompt(rng, 4, 30));
    const auto q = quantize_cache(pre.cache, DType::kQ8);
    std::size_t si = 0;
    for (std::size_t l = 0; l < q.cache.layers.size(); ++l) {
      for (auto [orig, deq] : {std::pair{&pre.cache.layers[l].keys, &q.cache.layers[l].keys},
                               std::pair{&pre.cache.layers[l].values, &q.cache.layers[l].values}}) {
        const float s = q.scales[si++];
        EXPECT_EQ(s, q8_scale(*orig));
        for (std::size_t j = 0; j < orig->size(); ++j)
          EXPECT_LE(std::fabs((*orig)[j] - (*deq)[j]), s / 2 * (1 + 1e-6f));
      }
    }
  }
}

TEST(Quantize, AllZeroTensorGetsUnitScale) {
  std::vector<float> z(8, 0.0f);
  EXPECT_EQ(q8_scale(z), 1.0f);
}

TEST(Quantize, Q8FirstTokenAgreement) {
  const auto p = init_model<float>(default_config(false));
  std::mt19937_64 rng(21);
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_prompt(rng, 8, 40);
    auto pre = prefill(p, prompt);
    const auto full = make_record("x", pre.cache, pre.penultimate.h, "", DType::kF32);
    const auto q8 = make_record("x", pre.cache, pre.penultimate.h, "", DType::kQ8);
    agree += decode_first(p, full.cache, std::span<const float>(full.h)).token ==
             decode_first(p, q8.cache, std::span<const float>(q8.h)).token;
  }
  EXPECT_GE(agree, 95);
}

TEST(Compress, FullRetentionIsIdentity) {
  const auto p = init_model<float>(small_config());
  auto pre = prefill(p, encode_text("a somewhat longer prompt"));
  EXPECT_EQ(compress_cache(pre.cache, 1.0, pre.attention_mass), pre.cache);
}

TEST(Compress, CeilingAndLastPosition) {
  const auto p = init_model<float>(small_config());
  auto pre = prefill(p, encode_text("abcdefghi"));  // BOS + 9 bytes
  ASSERT_EQ(pre.cache.prompt_length, 10u);
  const auto c = compress_cache(pre.cache, 0.2, pre.attention_mass);
  for (const auto& lc : c.layers) {
    ASSERT_EQ(lc.size(), 2u);
    EXPECT_EQ(lc.positions.back(), 9u);
    EXPECT_LT(lc.positions[0], lc.positions[1]);
  }
  c.validate();
  EXPECT_EQ(compress_cache(c, 0.2, pre.attention_mass), c);
}

TEST(Compress, KeepsHighestScoresWithRecentTieBreak) {
  KVCache<float> c;
  c.prompt_length = c.next_position = 6;
  c.n_kv_heads = 1;
  c.d_head = 1;
  c.layers.resize(1);
  for (std::uint32_t i = 0; i < 6; ++i) {
    c.layers[0].positions.push_back(i);
    c.layers[0].keys.push_back(static_cast<float>(i));
    c.layers[0].values.push_back(static_cast<float>(10 + i));
  }
  std::vector<std::vector<double>> scores{{0.5, 0.9, 0.1, 0.5, 0.5, 0.0}};
  const auto out = compress_cache(c, 0.5, scores);  // keep 3
  EXPECT_EQ(out.layers[0].positions, (std::vector<std::uint32_t>{1, 4, 5}));
  EXPECT_EQ(out.layers[0].keys, (std::vector<float>{1, 4, 5}));
  EXPECT_EQ(out.layers[0].values, (std::vector<float>{11, 14, 15}));
}

TEST(Compress, NonPositiveFractionIsParameterError) {
  const auto p = init_model<float>(small_config());
  auto pre = prefill(p, encode_text("abc"));
  for (double f : {0.0, -0.5, 1.5}) {
    try {
      compress_cache(pre.cache, f, pre.attention_mass);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kParameter);
    }
  }
}

TEST(Compress, DecodeFirstStillWorks) {
  const auto p = init_model<float>(small_config());
  auto pre = prefill(p, encode_text("the quick brown fox"));
  const auto c = compress_cache(pre.cache, 0.2, pre.attention_mass);
  const auto r = decode_first(p, c, std::span<const float>(pre.penultimate.h));
  EXPECT_EQ(r.logits.size(), 259u);
  GenerateOptions opt;
  opt.max_new = 4;
  EXPECT_FALSE(generate(p, c, std::span<const float>(pre.penultimate.h), opt).empty());
}

TEST(Scan, EncodedRecordsNeverContainPromptTokens) {
  const auto p = init_model<float>(small_config());
  std::mt19937_64 rng(31);
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_prompt(rng, 8, 40);
    auto pre = prefill(p, prompt);
    for (DType d : {DType::kF32, DType::kF16, DType::kQ8}) {
      const Bytes b = encode_record(make_record("r" + std::to_string(i), pre.cache, pre.penultimate.h, "ans", d));
      EXPECT_FALSE(contains_token_sequence(b, prompt)) << "prompt " << i;
    }
  }
}

TEST(Scan, DetectsPlantedSequence) {
  const TokenSeq t = encode_text("secret prompt");
  Bytes b = {1, 2, 3};
  const std::string s = "xxsecret promptyy";
  b.insert(b.end(), s.begin(), s.end());
  EXPECT_TRUE(contains_token_sequence(b, t));
  ByteWriter w;
  for (Token x : t) w.u32(x);
  EXPECT_TRUE(contains_token_sequence(w.buffer(), t));
}

TEST(Storage, SevenBillionShape) {
  const StorageShape llama{32, 32, 128};
  const double full = estimate_storage(llama, 100000, DType::kF16, 1.0).total_bytes();
  EXPECT_NEAR(full / 1e9, 52.4288, 1e-3);
  EXPECT_NEAR(full, 50e9, 5e9);
  const double small = estimate_storage(llama, 100000, DType::kF16, 0.007).total_bytes();
  EXPECT_NEAR(small / 1e6, 367.0, 0.1);
  EXPECT_NEAR(small, 350e6, 35e6);
}

TEST(Storage, ZeroTokensIsOverheadOnlyAndLinear) {
  const StorageShape s{4, 2, 32};
  const auto zero = estimate_storage(s, 0, DType::kF32, 1.0);
  EXPECT_EQ(zero.payload_bytes, 0.0);
  EXPECT_GT(zero.total_bytes(), 0.0);
  const double a = estimate_storage(s, 1000, DType::kF32, 0.5).payload_bytes;
  EXPECT_DOUBLE_EQ(estimate_storage(s, 2000, DType::kF32, 0.5).payload_bytes, 2 * a);
  EXPECT_DOUBLE_EQ(estimate_storage(s, 1000, DType::kF32, 1.0).payload_bytes, 2 * a);
}

TEST(Storage, MatchesActualRecordPayload) {
  const auto cfg = small_config();
  const auto p = init_model<float>(cfg);
  auto pre = prefill(p, encode_text("sixteen bytes!!"));
  const Bytes b = encode_record(make_record("", pre.cache, pre.penultimate.h, "", DType::kF32));
  const auto est = estimate_storage(storage_shape(cfg), 16, DType::kF32, 1.0);
  // the estimate leaves out index lists and h
  EXPECT_EQ(b.size(), est.payload_bytes + 4 * 16 * cfg.n_layers + 4 * cfg.d_model + 29 + 4 * cfg.n_layers);
}

TEST(Checkpoint, RoundTripAndFingerprint) {
  auto cfg = small_config(2, 16, 2, 1, 3);
  cfg.norm = NormKind::kLayer;
  cfg.activation = Activation::kGelu;
  cfg.pos_encoding = PosEncoding::kLearnedAbsolute;
  const auto p = init_model<float>(cfg);
  const Bytes b = serialize_checkpoint(p);
  const auto back = deserialize_checkpoint<float>(b);
  EXPECT_EQ(config_to_text(back.config), config_to_text(p.config));
  bool same = true;
  std::vector<const Mat<float>*> a_t, b_t;
  p.for_each([&](std::string_view, const Mat<float>& m) { a_t.push_back(&m); });
  back.for_each([&](std::string_view, const Mat<float>& m) { b_t.push_back(&m); });
  ASSERT_EQ(a_t.size(), b_t.size());
  for (std::size_t i = 0; i < a_t.size(); ++i) same = same && *a_t[i] == *b_t[i];
  EXPECT_TRUE(same);
  EXPECT_EQ(model_fingerprint(back), model_fingerprint(p));
  EXPECT_EQ(model_fingerprint(p.cast<double>()), model_fingerprint(p));
  EXPECT_NE(model_fingerprint(init_model<float>(small_config(2, 16, 2, 1, 4))), model_fingerprint(p));

  Bytes bad = b;
  bad[bad.size() - 20] ^= 4;
  try {
    deserialize_checkpoint<float>(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCorruption);
  }
  Bytes bad_magic = b;
  bad_magic[0] = 'x';
  EXPECT_THROW(deserialize_checkpoint<float>(bad_magic), Error);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto p = init_model<float>(small_config());
  const std::string path = ::testing::TempDir() + "crd_ckpt_test.bin";
  save_checkpoint(p, path);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint<float>(path)), serialize_checkpoint(p));
  std::remove(path.c_str());
}

}  // namespace
}  // namespace crd
