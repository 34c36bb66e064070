// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <set>
#include <string>

#include "dmnn/checkpoint.hpp"
#include "dmnn/network.hpp"
#include "dmnn/rng.hpp"
#include "spec_walker.hpp"

namespace {

using dmnn::DmnnNetwork;
using dmnn::ExecMode;
using dmnn::ForwardRecord;
using dmnn::NetworkSpec;
using dmnn::Rng;
using dmnn::TensorF;

TensorF random_input(int batch, int size, std::uint64_t seed) {
  Rng rng(seed);
  return TensorF::randn({batch, 3, size, size}, rng, 0.5);
}

DmnnNetwork make_net(std::uint64_t seed = 1, int n_sub = 2) {
  return DmnnNetwork(dmnn::make_preset("dmnn8-synthetic", n_sub), seed);
}

TEST(Network, ParameterCensusIsUniqueAndComplete) {
  DmnnNetwork net = make_net();
  std::set<std::string> names;
  int tensors = 0;
  for (auto& nt : net.named_tensors()) {
    EXPECT_TRUE(names.insert(nt.name).second) << "duplicate name " << nt.name;
    ++tensors;
  }
  // stem(5) + 2 transitions(5 each) + 3 blocks(2 subs x 3 convbn x 5)
  // + controllers(8,6 first) + head(2) + data stats(2)
  const int expected = 5 + 2 * 5 + 3 * (2 * 3 * 5) + (6 + 8 + 8) + 2 + 2;
  EXPECT_EQ(tensors, expected);
  EXPECT_EQ(net.spec().num_blocks(), 3);

  // weight-decay flags: conv/linear weights yes, biases and norms no
  for (auto& p : net.parameters()) {
    if (p.name.ends_with("norm.gamma") || p.name.ends_with("norm.beta") ||
        p.name.ends_with(".b1") || p.name.ends_with(".b3") || p.name.ends_with("fc.bias")) {
      EXPECT_FALSE(p.weight_decay) << p.name;
    }
    if (p.name.ends_with("conv.weight") || p.name.ends_with("fc.weight")) {
      EXPECT_TRUE(p.weight_decay) << p.name;
    }
  }
}

TEST(Network, AllGatesOffReproducesIdentityBlocksBitExactly) {
  DmnnNetwork net = make_net(3);
  net.force_all_gates(false);
  net.set_record_block_io(true);
  Rng rng(9);
  TensorF x = random_input(2, 32, 31);
  ForwardRecord rec = net.forward(x, ExecMode::EvalMasked, rng);
  ASSERT_EQ(rec.block_inputs.size(), 3u);
  for (std::size_t l = 0; l < rec.block_inputs.size(); ++l) {
    const auto& in = rec.block_inputs[l].values();
    const auto& out = rec.block_outputs[l].values();
    ASSERT_EQ(in.size(), out.size());
    EXPECT_EQ(0, std::memcmp(in.data(), out.data(), in.size() * sizeof(float))) << "block " << l;
  }
}

TEST(Network, AllOnMaskedEqualsUngatedExecution) {
  DmnnNetwork net = make_net(4);
  net.force_all_gates(true);
  Rng rng(2);
  TensorF x = random_input(1, 32, 17);
  ForwardRecord masked = net.forward(x, ExecMode::EvalMasked, rng);
  ForwardRecord skip = net.forward(x, ExecMode::EvalSkip, rng);  // executes every sub-block
  double md = 0;
  for (std::size_t i = 0; i < masked.logits.values().size(); ++i)
    md = std::max(md, std::fabs(static_cast<double>(masked.logits.values()[i]) -
                                skip.logits.values()[i]));
  EXPECT_LE(md, 1e-5);
}

TEST(Network, MaskedAndSkippingEvalAgreeAtBatchOne) {
  DmnnNetwork net = make_net(5);
  Rng rng(4);
  TensorF x = random_input(1, 32, 31);
  ForwardRecord masked = net.forward(x, ExecMode::EvalMasked, rng);
  ForwardRecord skip = net.forward(x, ExecMode::EvalSkip, rng);
  ASSERT_EQ(masked.decisions.size(), skip.decisions.size());
  for (std::size_t l = 0; l < masked.decisions.size(); ++l)
    EXPECT_EQ(masked.decisions[l].s, skip.decisions[l].s);
  double md = 0;
  for (std::size_t i = 0; i < masked.logits.values().size(); ++i)
    md = std::max(md, std::fabs(static_cast<double>(masked.logits.values()[i]) -
                                skip.logits.values()[i]));
  EXPECT_LE(md, 1e-5);
}

TEST(Network, SkippingEvalRejectsBatches) {
  DmnnNetwork net = make_net(6);
  Rng rng(5);
  TensorF x = random_input(2, 32, 8);
  try {
    net.forward(x, ExecMode::EvalSkip, rng);
    FAIL() << "expected batch-size error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("masked"), std::string::npos);
  }
}

TEST(Network, EvalDecisionsAreDeterministic) {
  DmnnNetwork net = make_net(7);
  Rng rng(11);
  TensorF x = random_input(3, 32, 23);
  ForwardRecord a = net.forward(x, ExecMode::EvalMasked, rng);
  ForwardRecord b = net.forward(x, ExecMode::EvalMasked, rng);
  for (std::size_t l = 0; l < a.decisions.size(); ++l) EXPECT_EQ(a.decisions[l].s, b.decisions[l].s);
  EXPECT_EQ(0, std::memcmp(a.logits.data(), b.logits.data(),
                           a.logits.values().size() * sizeof(float)));
}

TEST(Network, EarlierDecisionsIgnoreLaterParameters) {
  DmnnNetwork net = make_net(8);
  Rng rng(13);
  TensorF x = random_input(2, 32, 29);
  ForwardRecord before = net.forward(x, ExecMode::EvalMasked, rng);

  // perturb the last block's weights and its controller
  auto params = net.parameters();
  for (auto& p : params) {
    if (p.name.rfind("block2.", 0) == 0) {
      for (auto& v : p.tensor->values()) v += 0.37f;
    }
  }
  ForwardRecord after = net.forward(x, ExecMode::EvalMasked, rng);
  EXPECT_EQ(before.decisions[0].s, after.decisions[0].s);
  EXPECT_EQ(before.decisions[1].s, after.decisions[1].s);
  EXPECT_EQ(before.decisions[0].relaxed, after.decisions[0].relaxed);
}

TEST(Network, PerSampleFlopsMatchInstrumentedSkippingExecution) {
  NetworkSpec spec = dmnn::make_preset("dmnn8-synthetic", 2);
  DmnnNetwork net(spec, 21);
  auto instrumented = testutil::instrumented_macs(spec, spec.input_size);
  ASSERT_EQ(instrumented.total, net.flops().total());

  Rng pat_rng(4242);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<std::uint8_t>> pattern;
    for (const auto* b : spec.blocks()) {
      std::vector<std::uint8_t> row(static_cast<std::size_t>(b->n_sub));
      for (auto& v : row) v = pat_rng.uniform() < 0.5 ? 1 : 0;
      pattern.push_back(row);
    }
    net.force_gates(pattern);
    Rng rng(1);
    TensorF x = random_input(1, 32, 100 + static_cast<std::uint64_t>(trial));
    ForwardRecord rec = net.forward(x, ExecMode::EvalSkip, rng);
    EXPECT_EQ(rec.per_sample_flops[0], testutil::instrumented_pattern_macs(instrumented, pattern))
        << "trial " << trial;
  }
}

TEST(Network, TrainModeProducesGradientsEverywhere) {
  DmnnNetwork net = make_net(15);
  net.ensure_grad_tracking();
  Rng rng(3);
  TensorF x = random_input(4, 32, 41);
  ForwardRecord rec = net.forward(x, ExecMode::Train, rng, true);
  ASSERT_EQ(rec.category_probs.size(), 3u);
  TensorF loss = dmnn::cross_entropy(dmnn::softmax_lastdim(rec.logits), {1, 2, 3, 4});
  loss.backward();
  double fc_grad = 0;
  for (auto& p : net.parameters())
    if (p.name == "head.fc.weight")
      for (float g : p.tensor->grad()) fc_grad += std::fabs(g);
  EXPECT_GT(fc_grad, 0.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const std::string path = "ckpt_roundtrip_test.dmnn";
  DmnnNetwork net = make_net(99);
  // move running stats and data normalisation away from defaults
  net.set_normalization({0.4f, 0.5f, 0.6f}, {0.2f, 0.25f, 0.3f});
  Rng rng(7);
  TensorF x = random_input(2, 32, 55);
  (void)net.forward(x, ExecMode::Train, rng);

  dmnn::save_checkpoint(net, path);
  DmnnNetwork loaded = dmnn::load_checkpoint(path);

  auto a = net.named_tensors();
  auto b = loaded.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor->shape(), b[i].tensor->shape());
    EXPECT_EQ(0, std::memcmp(a[i].tensor->data(), b[i].tensor->data(),
                             a[i].tensor->values().size() * sizeof(float)))
        << a[i].name;
  }

  Rng r1(5), r2(5);
  ForwardRecord e1 = net.forward(x, ExecMode::EvalMasked, r1);
  ForwardRecord e2 = loaded.forward(x, ExecMode::EvalMasked, r2);
  EXPECT_EQ(0, std::memcmp(e1.logits.data(), e2.logits.data(),
                           e1.logits.values().size() * sizeof(float)));
  std::remove(path.c_str());
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
  const std::string path = "ckpt_bad_test.dmnn";
  {
    std::ofstream os(path, std::ios::binary);
    os.write("NOPE", 4);
    os.put(1);
    os.put(0);
  }
  try {
    (void)dmnn::load_checkpoint(path);
    FAIL() << "expected magic error";
  } catch (const dmnn::CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  {
    std::ofstream os(path, std::ios::binary);
    os.write("DMNN", 4);
    os.put(9);
    os.put(0);  // version 9
  }
  try {
    (void)dmnn::load_checkpoint(path);
    FAIL() << "expected version error";
  } catch (const dmnn::CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Network, Mbv2BlocksForwardAndGate) {
  NetworkSpec spec;
  spec.name = "toy-mbv2";
  spec.input_size = 16;
  spec.num_classes = 4;
  spec.num_categories = 4;
  spec.stem.emplace_back(dmnn::ConvSpec{3, 8, 3, 2, 1});
  dmnn::BlockSpec b1;
  b1.kind = dmnn::BlockKind::Mbv2InvertedResidual;
  b1.c_in = 8;
  b1.expansion = 4.0;
  b1.c_out = 8;
  b1.stride = 1;
  b1.n_sub = 2;
  dmnn::resolve_block(b1);
  spec.body.emplace_back(b1);
  dmnn::BlockSpec b2 = b1;
  b2.c_out = 12;
  b2.stride = 2;
  b2.stage_index = 1;
  dmnn::resolve_block(b2);
  spec.body.emplace_back(b2);

  DmnnNetwork net(spec, 5);
  EXPECT_TRUE(spec.blocks()[1]->subs[0].always_on);

  Rng rng(1);
  TensorF x = random_input(2, 16, 77);
  ForwardRecord rec = net.forward(x, ExecMode::EvalMasked, rng);
  EXPECT_EQ(rec.logits.dim(1), 4);
  // non-identity block keeps its first sub-block on
  EXPECT_EQ(rec.decisions[1].on(0, 0), 1);
  EXPECT_EQ(rec.decisions[1].on(1, 0), 1);

  // all gates off on the identity block -> unchanged input
  net.force_gates({{0, 0}, {1, 0}});
  net.set_record_block_io(true);
  ForwardRecord off = net.forward(x, ExecMode::EvalMasked, rng);
  EXPECT_EQ(0, std::memcmp(off.block_inputs[0].data(), off.block_outputs[0].data(),
                           off.block_inputs[0].values().size() * sizeof(float)));
}

}  // namespace
