#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "checkpoint.hpp"
#include "doctest.h"
#include "errors.hpp"
#include "network.hpp"
#include "support.hpp"
#include "trainer.hpp"

using namespace advcheck;
using namespace advcheck::netcore;
using advcheck::testing::random_tensor;

namespace {

Network identity_dense() {
  auto l = LayerSpec::dense(2);
  l.weight = Tensor({2, 2}, {1, 0, 0, 1});
  l.bias = Tensor({2});
  return Network({2}, {l});
}

Network two_layer_conv(std::uint64_t seed) {
  return Network::initialized({1, 8, 8},
                              {LayerSpec::conv2d(3, 3), LayerSpec::relu(), LayerSpec::conv2d(2, 3, 2, 1),
                               LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(3)},
                              seed);
}

}  // namespace

TEST_CASE("identity dense layer passes the input through") {
  const auto net = identity_dense();
  const auto trace = net.forward(Tensor({2}, {1, 2}));
  CHECK(trace.outputs[0].data == std::vector<float>{1, 2});
  CHECK(trace.logits == std::vector<float>{1, 2});
  CHECK(trace.predicted == 1);
}

TEST_CASE("zero input through a bias-free relu net gives an all-zero trace") {
  const auto net = Network::initialized(
      {1, 6, 6}, {LayerSpec::conv2d(2, 3), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(4)}, 3);
  const auto trace = net.forward(Tensor({1, 6, 6}));
  for (const auto& out : trace.outputs)
    for (float v : out.data) CHECK(v == 0.0f);
  CHECK(trace.predicted == 0);
}

TEST_CASE("conv stack matches the nested-loop oracle") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    auto net = two_layer_conv(rng());
    testing::randomize_biases(net, rng);
    const auto x = random_tensor({1, 8, 8}, rng);
    const auto trace = net.forward(x);
    const auto& L = net.layers();
    const auto c0 = testing::naive_conv2d(x, L[0].weight, L[0].bias, 1, 0);
    const auto r1 = testing::naive_relu(c0);
    const auto c2 = testing::naive_conv2d(r1, L[2].weight, L[2].bias, 2, 1);
    const auto r3 = testing::naive_relu(c2);
    const auto d5 = testing::naive_dense(r3.flattened(), L[5].weight, L[5].bias);
    const std::vector<const Tensor*> expect{&c0, &r1, &c2, &r3, &r3, &d5};
    for (std::size_t i = 0; i < expect.size(); ++i) {
      REQUIRE(trace.outputs[i].size() == expect[i]->size());
      for (std::size_t j = 0; j < expect[i]->size(); ++j)
        CHECK(std::abs(trace.outputs[i].data[j] - expect[i]->data[j]) <= 1e-5);
    }
  }
}

TEST_CASE("maxpool matches the oracle") {
  std::mt19937_64 rng(5);
  const auto net = Network::initialized({2, 6, 6}, {LayerSpec::maxpool2d(2), LayerSpec::flatten(), LayerSpec::dense(2)}, 1);
  const auto x = random_tensor({2, 6, 6}, rng);
  CHECK(net.forward(x).outputs[0] == testing::naive_maxpool(x, 2, 2));
}

TEST_CASE("softmax is a distribution for any logits") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-80.0f, 80.0f);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<float> z(1 + rep % 9);
    for (auto& v : z) v = u(rng);
    const auto p = softmax(z);
    double sum = 0.0;
    for (float v : p) {
      CHECK(v >= 0.0f);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("forward is pure") {
  std::mt19937_64 rng(8);
  const auto net = testing::random_small_network(rng);
  const auto x = random_tensor(net.input_shape(), rng);
  const auto a = net.forward(x), b = net.forward(x);
  CHECK(a.outputs == b.outputs);
  CHECK(a.logits == b.logits);
}

TEST_CASE("input gradient of a linear logit is the weight row") {
  std::mt19937_64 rng(4);
  const auto net = Network::initialized({5}, {LayerSpec::dense(3)}, 9);
  const auto x = random_tensor({5}, rng);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto g = net.grad_wrt_input(x, LogitLoss{c});
    for (std::size_t i = 0; i < 5; ++i) CHECK(g.data[i] == net.layers()[0].weight.data[c * 5 + i]);
  }
}

TEST_CASE("input gradients match central differences on random networks") {
  std::mt19937_64 rng(101);
  for (int n = 0; n < 10; ++n) {
    const auto net = testing::random_small_network(rng);
    const auto x = random_tensor(net.input_shape(), rng);
    const auto st = testing::check_input_gradient(net, x, net.predict(x), 20, rng);
    CHECK(st.checked == 20);
    CHECK(st.failed == 0);
  }
}

TEST_CASE("relu subgradient at zero is zero") {
  auto d = LayerSpec::dense(1);
  d.weight = Tensor({1, 1}, {1});
  d.bias = Tensor({1});
  auto out = LayerSpec::dense(1);
  out.weight = Tensor({1, 1}, {2});
  out.bias = Tensor({1});
  const Network net({1}, {d, LayerSpec::relu(), out});
  CHECK(net.grad_wrt_input(Tensor({1}, {0.0f}), LogitLoss{0}).data[0] == 0.0f);
  CHECK(net.grad_wrt_input(Tensor({1}, {0.5f}), LogitLoss{0}).data[0] == 2.0f);
}

TEST_CASE("layer gradient at the logit layer is one-hot") {
  std::mt19937_64 rng(6);
  const auto net = testing::random_small_network(rng);
  const auto x = random_tensor(net.input_shape(), rng);
  for (std::size_t c = 0; c < net.class_count(); ++c) {
    const auto g = net.grad_wrt_layer(x, net.logit_layer(), c);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.data[i] == (i == c ? 1.0f : 0.0f));
  }
}

TEST_CASE("layer gradient through a linear chain is the top weight row") {
  auto w1 = LayerSpec::dense(4);
  auto w2 = LayerSpec::dense(3);
  const auto net = Network::initialized({5}, {w1, w2}, 12);
  std::mt19937_64 rng(1);
  const auto x = random_tensor({5}, rng);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto g = net.grad_wrt_layer(x, 0, c);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.data[i] == net.layers()[1].weight.data[c * 4 + i]);
  }
}

TEST_CASE("layer gradients match central differences on every layer") {
  std::mt19937_64 rng(202);
  for (int n = 0; n < 10; ++n) {
    const auto net = testing::random_small_network(rng);
    const auto x = random_tensor(net.input_shape(), rng);
    const auto c = net.predict(x);
    for (std::size_t layer = 0; layer <= net.logit_layer(); ++layer)
      for (auto target : {GradientTarget::logit, GradientTarget::probability}) {
        CAPTURE(n);
        CAPTURE(layer);
        const auto st = testing::check_layer_gradient(net, x, layer, c, target, 20, rng);
        CHECK(st.checked == 20);
        CHECK(st.failed == 0);
      }
  }
}

TEST_CASE("input gradient agrees with the first layer gradient through its Jacobian") {
  std::mt19937_64 rng(303);
  for (int n = 0; n < 10; ++n) {
    const auto net = testing::random_small_network(rng);
    const auto x = random_tensor(net.input_shape(), rng);
    const auto c = net.predict(x);
    const auto gin = net.grad_wrt_input(x, LogitLoss{c});
    const auto g0 = net.grad_wrt_layer(x, 0, c);
    const auto& l0 = net.layers()[0];
    Tensor expect(net.input_shape());
    if (l0.kind == LayerKind::flatten) {
      expect.data = g0.data;
    } else {
      REQUIRE(l0.kind == LayerKind::conv2d);
      // Transpose of the convolution: each output gradient scatters through the kernel.
      const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
      const std::size_t O = l0.output_shape[0], OH = l0.output_shape[1], OW = l0.output_shape[2], K = l0.kernel;
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < OH; ++i)
          for (std::size_t j = 0; j < OW; ++j)
            for (std::size_t ch = 0; ch < C; ++ch)
              for (std::size_t a = 0; a < K; ++a)
                for (std::size_t b = 0; b < K; ++b) {
                  const long r = long(i * l0.stride + a) - long(l0.padding);
                  const long s = long(j * l0.stride + b) - long(l0.padding);
                  if (r < 0 || s < 0 || r >= long(H) || s >= long(W)) continue;
                  expect.data[(ch * H + std::size_t(r)) * W + std::size_t(s)] +=
                      g0.data[(o * OH + i) * OW + j] * l0.weight.data[((o * C + ch) * K + a) * K + b];
                }
    }
    for (std::size_t i = 0; i < gin.size(); ++i) CHECK(std::abs(gin.data[i] - expect.data[i]) <= 1e-5);
  }
}

TEST_CASE("first-layer perturbation is exactly linear for a linear layer") {
  auto l = LayerSpec::dense(2);
  l.weight = Tensor({2, 3}, {0.5f, -1.0f, 2.0f, 0.25f, 1.0f, -0.5f});
  l.bias = Tensor({2}, {0.125f, -0.25f});
  const Network net({3}, {l});
  const Tensor x({3}, {0.5f, 0.25f, 0.75f});
  const Tensor dx({3}, {0.25f, -0.5f, 0.125f});
  Tensor xp = x;
  for (std::size_t i = 0; i < 3; ++i) xp.data[i] += dx.data[i];
  const auto a = net.forward(x).outputs[0], b = net.forward(xp).outputs[0];
  const auto wdx = testing::naive_dense(dx, l.weight, Tensor());
  for (std::size_t i = 0; i < 2; ++i) CHECK(b.data[i] - a.data[i] == wdx.data[i]);
}

TEST_CASE("structure errors are rejected") {
  CHECK_THROWS_AS(Network({1, 4, 4}, {LayerSpec::dense(2)}), StructureError);
  CHECK_THROWS_AS(Network({2}, {LayerSpec::softmax(), LayerSpec::dense(2)}), StructureError);
  CHECK_THROWS_AS(Network({1, 2, 2}, {LayerSpec::conv2d(1, 3), LayerSpec::flatten(), LayerSpec::dense(2)}), StructureError);
}

TEST_CASE("forward rejects inputs of the wrong shape") {
  const auto net = identity_dense();
  CHECK_THROWS_AS(net.forward(Tensor({3})), ShapeMismatch);
}

TEST_CASE("linearly separable points are fit by one dense layer") {
  std::mt19937_64 rng(17);
  std::normal_distribution<float> n(0.0f, 0.3f);
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  for (int i = 0; i < 200; ++i) {
    const std::size_t y = std::size_t(i % 2);
    const float cx = y ? 1.5f : -1.5f;
    xs.emplace_back(Shape{2}, std::vector<float>{cx + n(rng), n(rng)});
    ys.push_back(y);
  }
  auto net = Network::initialized({2}, {LayerSpec::dense(2)}, 5);
  TrainOptions opt;
  opt.epochs = 50;
  const auto report = train_classifier(net, xs, ys, opt);
  CHECK(report.train_accuracy >= 0.99);
  CHECK(report.epoch_loss.size() == 50);
}

TEST_CASE("zero epochs leave parameters unchanged") {
  auto net = Network::initialized({2}, {LayerSpec::dense(2)}, 5);
  const auto before = net;
  std::vector<Tensor> xs{Tensor({2}, {1, 0})};
  std::vector<std::size_t> ys{1};
  TrainOptions opt;
  opt.epochs = 0;
  train_classifier(net, xs, ys, opt);
  CHECK(net == before);
}

TEST_CASE("training is reproducible bit for bit") {
  std::mt19937_64 rng(3);
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  for (int i = 0; i < 64; ++i) {
    xs.push_back(random_tensor({1, 6, 6}, rng));
    ys.push_back(std::size_t(i % 3));
  }
  auto make = [] {
    return Network::initialized({1, 6, 6}, {LayerSpec::conv2d(2, 3), LayerSpec::relu(), LayerSpec::flatten(),
                                            LayerSpec::dense(3)},
                                21);
  };
  for (auto optimizer : {Optimizer::sgd_momentum, Optimizer::adam}) {
    auto a = make(), b = make();
    TrainOptions opt;
    opt.epochs = 3;
    opt.optimizer = optimizer;
    opt.learning_rate = 0.01;
    train_classifier(a, xs, ys, opt);
    train_classifier(b, xs, ys, opt);
    CHECK(a == b);
  }
}

TEST_CASE("non-finite loss reports the epoch") {
  auto net = Network::initialized({2}, {LayerSpec::dense(2)}, 5);
  std::vector<Tensor> xs{Tensor({2}, {1e30f, 1e30f}), Tensor({2}, {-1e30f, 1e30f})};
  std::vector<std::size_t> ys{0, 1};
  TrainOptions opt;
  opt.epochs = 3;
  opt.learning_rate = 1e10;
  CHECK_THROWS_AS(train_classifier(net, xs, ys, opt), TrainingError);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  std::mt19937_64 rng(77);
  const auto dir = std::filesystem::temp_directory_path() / "advcheck_netcore_test";
  std::filesystem::create_directories(dir);
  for (int n = 0; n < 5; ++n) {
    const auto net = testing::random_small_network(rng);
    const auto path = dir / ("net" + std::to_string(n) + ".ckpt");
    save_checkpoint(path, net, {{"note", "xy"}});
    const auto back = load_checkpoint(path);
    CHECK(back.network == net);
    CHECK(back.metadata.at("note") == "xy");
    CHECK(fingerprint(back.network) == fingerprint(net));
    const auto x = random_tensor(net.input_shape(), rng);
    CHECK(back.network.logits(x) == net.logits(x));
    CHECK(serialize_checkpoint(back.network, back.metadata) == serialize_checkpoint(net, {{"note", "xy"}}));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("fingerprint ignores metadata and tracks parameters") {
  auto net = identity_dense();
  const auto fp = fingerprint(net);
  CHECK(fp.size() == 64);
  net.mutable_layers()[0].weight.data[1] = 1e-7f;
  CHECK(fingerprint(net) != fp);
}

TEST_CASE("malformed checkpoints are rejected") {
  const auto bytes = serialize_checkpoint(identity_dense());
  CHECK_THROWS_AS(parse_checkpoint("garbage"), FormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), FormatError);
  auto wrong_version = bytes;
  wrong_version.replace(wrong_version.find("format_version=1"), 16, "format_version=9");
  CHECK_THROWS_AS(parse_checkpoint(wrong_version), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/advcheck.ckpt"), IoError);
  CHECK_THROWS_AS(serialize_checkpoint(identity_dense(), {{"note", "x y"}}), InvalidArgument);
}

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
