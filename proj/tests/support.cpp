#include "support.hpp"

#include <array>

namespace mdunet::testing {
namespace {

std::vector<double> copy_of(std::span<const double> s) { return {s.begin(), s.end()}; }

LabelMask random_labels(std::int64_t n, std::int64_t h, std::int64_t w, std::int64_t classes, std::mt19937_64& rng) {
  LabelMask m(n, h, w);
  for (auto& l : m.labels) l = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(classes));
  return m;
}

}  // namespace

double check_conv(std::uint64_t seed, int kernel, double eps) {
  std::mt19937_64 rng(seed);
  const ConvSpec spec = kernel == 3 ? ConvSpec::conv3x3(3) : ConvSpec::conv1x1(3);
  auto x = random_tensor<double>({1, 2, 4, 4}, rng);
  auto w = random_tensor<double>({3, 2, kernel, kernel}, rng);
  std::vector<double> b = copy_of(random_tensor<double>({3, 1, 1, 1}, rng).values());
  const auto r = random_tensor<double>(conv2d_output_shape(x.shape(), w.shape(), spec), rng);
  auto loss = [&] { return weighted_sum(conv2d<double>(x, w, b, spec), r); };
  const auto g = conv2d_backward<double>(x, w, spec, r);
  CheckSet cs;
  cs.add(grad_check<double>(loss, x.values(), g.input.values(), eps));
  cs.add(grad_check<double>(loss, w.values(), g.weight.values(), eps));
  cs.add(grad_check<double>(loss, b, g.bias, eps));
  return cs.worst;
}

double check_batch_norm(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor<double>({1, 2, 3, 3}, rng);
  std::vector<double> gamma = copy_of(random_tensor<double>({2, 1, 1, 1}, rng, 0.5, 1.5).values());
  std::vector<double> beta = copy_of(random_tensor<double>({2, 1, 1, 1}, rng).values());
  const auto r = random_tensor<double>(x.shape(), rng);
  auto loss = [&] {
    RunningStats st(2);
    return weighted_sum(batch_norm<double>(x, gamma, beta, st, Mode::Train, nullptr), r);
  };
  RunningStats st(2);
  BatchNormCache<double> cache;
  batch_norm<double>(x, gamma, beta, st, Mode::Train, &cache);
  const auto g = batch_norm_backward<double>(cache, gamma, r);
  CheckSet cs;
  cs.add(grad_check<double>(loss, x.values(), g.input.values(), eps));
  cs.add(grad_check<double>(loss, gamma, g.gamma, eps));
  cs.add(grad_check<double>(loss, beta, g.beta, eps));
  return cs.worst;
}

double check_relu(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  auto x = away_from_zero<double>({2, 3, 4, 4}, rng);
  const auto r = random_tensor<double>(x.shape(), rng);
  auto loss = [&] { return weighted_sum(relu<double>(x), r); };
  const auto g = relu_backward<double>(x, r);
  return grad_check<double>(loss, x.values(), g.values(), eps).max_relative_error;
}

double check_maxpool(std::uint64_t seed, int factor_log2, double eps) {
  std::mt19937_64 rng(seed);
  const std::int64_t side = std::int64_t{2} << factor_log2;
  auto x = distinct_tensor<double>({2, 2, side, side}, rng);
  std::vector<std::int64_t> argmax;
  const auto out = maxpool2<double>(x, factor_log2, &argmax);
  const auto r = random_tensor<double>(out.shape(), rng);
  auto loss = [&] { return weighted_sum(maxpool2<double>(x, factor_log2), r); };
  const auto g = maxpool2_backward<double>(x.shape(), argmax, r);
  return grad_check<double>(loss, x.values(), g.values(), eps).max_relative_error;
}

double check_nearest_up(std::uint64_t seed, int factor_log2, double eps) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  const auto r = random_tensor<double>(nearest_up2<double>(x, factor_log2).shape(), rng);
  auto loss = [&] { return weighted_sum(nearest_up2<double>(x, factor_log2), r); };
  const auto g = nearest_up2_backward<double>(r, factor_log2);
  return grad_check<double>(loss, x.values(), g.values(), eps).max_relative_error;
}

double check_transposed_conv(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor<double>({2, 3, 3, 3}, rng);
  auto w = random_tensor<double>({3, 2, 2, 2}, rng);
  std::vector<double> b = copy_of(random_tensor<double>({2, 1, 1, 1}, rng).values());
  const auto r = random_tensor<double>({2, 2, 6, 6}, rng);
  auto loss = [&] { return weighted_sum(transposed_conv2<double>(x, w, b), r); };
  const auto g = transposed_conv2_backward<double>(x, w, r);
  CheckSet cs;
  cs.add(grad_check<double>(loss, x.values(), g.input.values(), eps));
  cs.add(grad_check<double>(loss, w.values(), g.weight.values(), eps));
  cs.add(grad_check<double>(loss, b, g.bias, eps));
  return cs.worst;
}

double check_concat(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  auto a = random_tensor<double>({2, 2, 3, 3}, rng);
  auto b = random_tensor<double>({2, 3, 3, 3}, rng);
  const auto r = random_tensor<double>({2, 5, 3, 3}, rng);
  auto loss = [&] {
    const std::array<const BasicTensor<double>*, 2> in{&a, &b};
    return weighted_sum(concat_channels<double>(in), r);
  };
  const std::array<std::int64_t, 2> split{2, 3};
  const auto parts = split_channels<double>(r, split);
  CheckSet cs;
  cs.add(grad_check<double>(loss, a.values(), parts[0].values(), eps));
  cs.add(grad_check<double>(loss, b.values(), parts[1].values(), eps));
  return cs.worst;
}

double check_softmax_ce(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  auto logits = random_tensor<double>({1, 2, 2, 2}, rng, -2.0, 2.0);
  const LabelMask labels = random_labels(1, 2, 2, 2, rng);
  auto loss = [&] { return softmax_cross_entropy<double>(logits, labels).loss; };
  const auto g = softmax_cross_entropy<double>(logits, labels).grad;
  return grad_check<double>(loss, logits.values(), g.values(), eps).max_relative_error;
}

double check_end_to_end(const ArchConfig& cfg, std::uint64_t seed, Shape input, double eps) {
  ModelGraph g = build_mdunet(cfg, seed);
  Executor<double> exec(g);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  auto x = random_tensor<double>(input, rng);
  const LabelMask labels = random_labels(input.n, input.h, input.w, cfg.num_classes, rng);
  auto loss = [&] { return softmax_cross_entropy<double>(exec.forward(x, Mode::Train), labels).loss; };
  exec.zero_grad();
  const auto out = exec.forward(x, Mode::Train);
  const auto ce = softmax_cross_entropy<double>(out, labels);
  const auto gx = exec.backward(ce.grad);
  CheckSet cs;
  for (std::size_t p = 0; p < g.parameters().size(); ++p) {
    const auto analytic = copy_of(exec.grad(p));
    cs.add(grad_check<double>(loss, exec.weight(p).values(), analytic, eps));
  }
  cs.add(grad_check<double>(loss, x.values(), gx.values(), eps));
  return cs.worst;
}

std::int64_t unet_param_oracle(const ArchConfig& cfg) {
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return out * in * k * k + out; };
  auto bn = [](std::int64_t c) { return 2 * c; };
  auto block = [&](std::int64_t in, std::int64_t out) { return conv(in, out, 3) + bn(out) + conv(out, out, 3) + bn(out); };
  std::int64_t total = block(cfg.input_channels, cfg.channels_at(1));
  for (int i = 2; i <= cfg.depth; ++i) total += block(cfg.channels_at(i - 1), cfg.channels_at(i));
  for (int i = cfg.depth - 1; i >= 1; --i) {
    const std::int64_t c = cfg.channels_at(i);
    const std::int64_t below = cfg.channels_at(i + 1);
    std::int64_t up_channels = below;
    if (cfg.upsample_mode == UpsampleMode::TransposedConv2) {
      total += below * c * 4 + c;
      up_channels = c;
    }
    total += block(c + up_channels, c);
  }
  total += conv(cfg.channels_at(1), cfg.num_classes, 1);
  return total;
}

}  // namespace mdunet::testing
