#include "advcon/model_io.hpp"
#include "advcon/pipeline.hpp"
#include "advcon/train.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <sstream>

using namespace advcon;

TEST_CASE("conv output size agrees with walking the padded input") {
  for (Index in = 1; in <= 12; ++in)
    for (Index k = 1; k <= 5; ++k)
      for (Index s = 1; s <= 3; ++s)
        for (Index p = 0; p <= 2; ++p) {
          if (k > in + 2 * p) continue;
          CHECK(conv_output_size(in, k, s, p) == oracle::count_windows(in, k, s, p));
        }
}

TEST_CASE("im2col convolution matches the direct loop") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Index c = 1 + static_cast<Index>(rng.below(3)), o = 1 + static_cast<Index>(rng.below(4));
    const Index k = 1 + static_cast<Index>(rng.below(3)), s = 1 + static_cast<Index>(rng.below(2));
    const Index p = static_cast<Index>(rng.below(2));
    const Tensor x = oracle::random_tensor({2, c, 7, 6}, rng);
    const Tensor w = oracle::random_tensor({o, c, k, k}, rng);
    const Tensor b = oracle::random_tensor({o}, rng);
    const Tensor got = kernels::conv2d(x, w, b, {s, p});
    const Tensor want = oracle::naive_conv2d(x, w, b, s, p);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("dense layer with identity weight passes its input through") {
  std::vector<Layer> layers(2);
  layers[0].spec = LayerSpec::flatten("flat");
  layers[1].spec = LayerSpec::dense("fc", 2);
  layers[1].weight = Tensor({2, 2}, (Eigen::ArrayXd(4) << 1, 0, 0, 1).finished());
  layers[1].bias = Tensor({2});
  const Model model({2, 1, 1}, layers);
  const Tensor logits = forward(model, Tensor({1, 2, 1, 1}, (Eigen::ArrayXd(2) << 1, 2).finished()));
  CHECK(logits[0] == 1.0);
  CHECK(logits[1] == 2.0);
}

TEST_CASE("conv with an identity kernel reproduces its input") {
  Model model({3, 5, 5}, {LayerSpec::conv2d("conv", 3, 3, 1, 1), LayerSpec::global_avg_pool("gap"),
                          LayerSpec::dense("fc", 2)},
              1);
  auto& conv = model.layers()[0];
  conv.weight.array().setZero();
  conv.bias.array().setZero();
  for (Index c = 0; c < 3; ++c) conv.weight[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  Rng rng(3);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng, 0.0, 1.0);
  CHECK(forward_to(model, "conv", x) == x);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  const Model model({3, 8, 8}, toy_cnn_layers(5), 2);
  const Matrix p = predict_proba(model, oracle::random_tensor({6, 3, 8, 8}, rng, 0.0, 1.0));
  for (Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
}

TEST_CASE("gradient of a sum of squares is twice the input") {
  Rng rng(5);
  const Tensor x = oracle::random_tensor({2, 3, 4}, rng);
  Tape tape;
  const Var v = tape.variable(x);
  tape.backward(ops::sum_squares(tape, v));
  CHECK(max_abs_diff(tape.grad(v), Tensor(x.shape(), 2.0 * x.array())) < 1e-15);
}

TEST_CASE("a loss that ignores the logits has zero input gradient") {
  Rng rng(6);
  const Model model({3, 8, 8}, toy_cnn_layers(4), 9);
  const Tensor x = Tensor::constant({1, 3, 8, 8}, 0.5);
  const auto g = grad_input(model, x, [](const RowMatrix&, RowMatrix& d) {
    d.setZero();
    return 1.0;
  });
  CHECK(g.grad.array().abs().maxCoeff() == 0.0);
}

TEST_CASE("non-finite loss is reported") {
  const Model model({3, 8, 8}, toy_cnn_layers(4), 9);
  const auto bad = [](const RowMatrix&, RowMatrix& d) {
    d.setZero();
    return std::nan("");
  };
  CHECK_THROWS_AS(grad_input(model, Tensor::constant({1, 3, 8, 8}, 0.5), bad), NumericError);
}

TEST_CASE("autodiff matches central finite differences for every layer kind") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Index c = 0;
    Model model = oracle::random_model(rng, trial, &c);
    const Shape& in = model.input_shape();
    const Tensor x = oracle::random_tensor({2, in[0], in[1], in[2]}, rng);
    const std::vector<int> labels{static_cast<int>(rng.below(static_cast<std::uint64_t>(model.num_classes()))),
                                  static_cast<int>(rng.below(static_cast<std::uint64_t>(model.num_classes())))};
    const auto r = oracle::check_gradients(model, x, labels);
    CHECK(r.input_error < 1e-3);
    CHECK(r.param_error < 1e-3);
  }
}

TEST_CASE("input gradient of the cross-entropy matches finite differences on a two-block CNN") {
  Rng rng(31);
  const Model model({2, 8, 8},
                    {LayerSpec::conv2d("c1", 4, 3, 1, 1), LayerSpec::relu("r1"), LayerSpec::maxpool2d("p1"),
                     LayerSpec::conv2d("c2", 4, 3, 1, 1), LayerSpec::relu("r2"), LayerSpec::global_avg_pool("gap"),
                     LayerSpec::dense("fc", 3)},
                    rng.next());
  Tensor x = oracle::random_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> label{1};
  const Tensor g = grad_input(model, x, label);
  const auto fd = oracle::central_differences(x, [&] { return oracle::mean_cross_entropy(forward(model, x), label); }, 1e-4);
  CHECK(oracle::relative_error(g.array(), fd) < 1e-3);
}

TEST_CASE("forward_from after forward_to reproduces forward at every cut") {
  Rng rng(99);
  const Model model({3, 32, 32}, toy_cnn_layers(8), 42);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = oracle::random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
    const Tensor full = forward(model, x);
    for (const auto& name : model.layer_names()) {
      CHECK(max_abs_diff(forward_from(model, name, forward_to(model, name, x)), full) <= 1e-12);
    }
  }
}

TEST_CASE("shape problems name the offending layer") {
  try {
    Model({3, 4, 4}, {LayerSpec::conv2d("conv", 2, 3), LayerSpec::maxpool2d("too_big", 4, 4), LayerSpec::flatten("f"),
                      LayerSpec::dense("fc", 2)},
          1);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("too_big") != std::string::npos);
  }
  const Model model({3, 8, 8}, toy_cnn_layers(4), 1);
  CHECK_THROWS_AS(forward(model, Tensor({1, 3, 9, 8})), ShapeError);
  CHECK_THROWS_AS(forward_to(model, "nope", Tensor({1, 3, 8, 8})), ConfigError);
  CHECK_THROWS_AS(forward_from(model, "relu2", Tensor({1, 3, 8, 8})), ShapeError);
}

TEST_CASE("training with zero learning rate leaves the weights alone") {
  ShapeDatasetConfig dc;
  dc.samples_per_class = 4;
  dc.num_classes = 4;
  dc.height = dc.width = 16;
  const auto data = generate_shapes(dc);
  Model model({3, 16, 16}, toy_cnn_layers(4), 5);
  const auto before = model.checksum();
  TrainConfig tc;
  tc.epochs = 2;
  tc.learning_rate = 0.0;
  train(model, data, tc);
  CHECK(model.checksum() == before);
}

TEST_CASE("logistic regression on separable points decreases the loss every epoch") {
  LabeledImages data;
  data.num_classes = 2;
  Rng rng(8);
  data.images = Tensor({40, 2, 1, 1});
  for (Index i = 0; i < 40; ++i) {
    const int y = static_cast<int>(i % 2);
    data.images[2 * i] = (y ? 1.0 : -1.0) + rng.uniform(-0.3, 0.3);
    data.images[2 * i + 1] = rng.uniform(-1.0, 1.0);
    data.labels.push_back(y);
  }
  Model model({2, 1, 1}, {LayerSpec::flatten("flat"), LayerSpec::dense("fc", 2)}, 3);
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 40;
  tc.learning_rate = 0.1;
  tc.optimizer = OptimizerKind::sgd;
  const auto r = train(model, data, tc);
  REQUIRE(r.loss_history.size() == 10);
  for (std::size_t e = 1; e < r.loss_history.size(); ++e) CHECK(r.loss_history[e] < r.loss_history[e - 1]);
  CHECK(accuracy(model, data) == 1.0);
}

TEST_CASE("training is bit-identical for a fixed seed") {
  ShapeDatasetConfig dc;
  dc.samples_per_class = 6;
  dc.num_classes = 4;
  dc.height = dc.width = 16;
  const auto data = generate_shapes(dc);
  TrainConfig tc;
  tc.epochs = 2;
  Model a({3, 16, 16}, toy_cnn_layers(4), 5), b({3, 16, 16}, toy_cnn_layers(4), 5);
  train(a, data, tc);
  train(b, data, tc);
  CHECK(a.checksum() == b.checksum());
  CHECK_THROWS_AS([] {
    TrainConfig bad;
    bad.epochs = 0;
    bad.validate();
  }(), ConfigError);
}

TEST_CASE("model files round-trip and reject foreign versions") {
  const Model model({3, 16, 16}, toy_cnn_layers(4), 12);
  std::stringstream buf;
  write_model(model, buf);
  const std::string bytes = buf.str();

  std::stringstream in(bytes);
  const Model back = read_model(in);
  CHECK(back.checksum() == model.checksum());
  Rng rng(1);
  const Tensor x = oracle::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  CHECK(forward(back, x) == forward(model, x));

  std::string versioned = bytes;
  versioned[8] = static_cast<char>(kModelFormatVersion + 1);
  std::stringstream v(versioned);
  CHECK_THROWS_AS(read_model(v), IoError);

  std::string magic = bytes;
  magic[0] = 'X';
  std::stringstream m(magic);
  CHECK_THROWS_AS(read_model(m), IoError);

  std::stringstream trailing(bytes + "x");
  CHECK_THROWS_AS(read_model(trailing), IoError);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_model(truncated), IoError);
}
