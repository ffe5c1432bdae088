#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>
#include <fstream>
#include <sstream>

#include "mdunet/checkpoint.hpp"
#include "mdunet/cli.hpp"
#include "mdunet/config.hpp"
#include "mdunet/dataset.hpp"
#include "mdunet/image_io.hpp"
#include "mdunet/inq.hpp"

using namespace mdunet;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mdunet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::vector<std::string>& args, std::string* out = nullptr, std::string* err = nullptr) {
  std::ostringstream o;
  std::ostringstream e;
  const int rc = run_command(args, o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return rc;
}

ArchConfig small() {
  ArchConfig c;
  c.depth = 2;
  c.base_channels = 2;
  return c;
}

}  // namespace

TEST(Pgm, DecodesHandWrittenBytes) {
  auto b = bytes_of("P5\n2 2\n255\n");
  b.insert(b.end(), {0, 255, 255, 0});
  const Tensor t = decode_pgm(b);
  ASSERT_EQ(t.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(t[0], 0.0f);
  EXPECT_EQ(t[1], 1.0f);
  EXPECT_EQ(t[2], 1.0f);
  EXPECT_EQ(t[3], 0.0f);
}

TEST(Pgm, HeaderComments) {
  auto b = bytes_of("P5\n# made by hand\n1 1\n# still header\n255\n");
  b.push_back(51);
  EXPECT_FLOAT_EQ(decode_pgm(b)[0], 0.2f);
}

TEST(Pgm, Errors) {
  EXPECT_THROW(decode_pgm(bytes_of("P2\n2 2\n255\n0 1 2 3\n")), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("XY")), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("P5\n2 2\n255\n\x01")), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("P5\n1 1\n65535\n\x01\x01")), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("P5\n1 1\n0\n\x01")), FormatError);
}

TEST(Pgm, RoundTrip) {
  Tensor t(Shape{1, 1, 3, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i * 17 % 256) / 255.0f;
  EXPECT_EQ(decode_pgm(encode_pgm(t)), t);
  const fs::path dir = scratch("pgm");
  save_pgm(dir / "a.pgm", t);
  EXPECT_EQ(load_pgm(dir / "a.pgm"), t);
  const std::vector<std::uint8_t> mask{0, 3, 0, 1};
  save_mask_pgm(dir / "m.pgm", mask, 2, 2);
  const auto raw = read_file(dir / "m.pgm");
  EXPECT_EQ(raw.back(), 255);
  EXPECT_EQ(raw[raw.size() - 2], 0);
}

TEST(Synthetic, DeterministicShapesAndNoiseFree) {
  SyntheticSpec s;
  s.count = 10;
  s.seed = 3;
  const Dataset a = synth_dataset(s);
  const Dataset b = synth_dataset(s);
  ASSERT_EQ(a.size(), 10U);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].mask.labels, b.samples[i].mask.labels);
    EXPECT_EQ(a.samples[i].image.shape(), (Shape{1, 1, 64, 64}));
    EXPECT_EQ(a.samples[i].mask.labels.size(), 64U * 64U);
  }
  s.noise = 0.0;
  const Dataset clean = synth_dataset(s);
  for (const auto& smp : clean.samples) {
    std::size_t fg = 0;
    for (std::size_t i = 0; i < smp.image.size(); ++i) {
      const float v = smp.image[i];
      EXPECT_TRUE(v == 0.2f || v == 1.0f);
      EXPECT_EQ(v == 1.0f, smp.mask.labels[i] == 1);
      fg += smp.mask.labels[i];
    }
    EXPECT_GT(fg, 0U);
  }
}

TEST(DatasetDir, PairsByStemAndValidates) {
  const fs::path root = scratch("data");
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  Tensor img(Shape{1, 1, 4, 4}, 0.5f);
  Tensor mask(Shape{1, 1, 4, 4}, 0.0f);
  mask[5] = 1.0f;
  save_pgm(root / "images" / "a.pgm", img);
  save_pgm(root / "masks" / "a.pgm", mask);
  const Dataset d = load_dataset_dir(root);
  ASSERT_EQ(d.size(), 1U);
  EXPECT_EQ(d.samples[0].mask.labels[5], 1);
  EXPECT_EQ(d.samples[0].mask.labels[4], 0);
  save_pgm(root / "images" / "b.pgm", img);
  EXPECT_THROW(load_dataset_dir(root), std::runtime_error);
  save_pgm(root / "masks" / "b.pgm", Tensor(Shape{1, 1, 2, 2}));
  EXPECT_THROW(load_dataset_dir(root), ShapeError);
  EXPECT_THROW(load_dataset_dir(scratch("empty")), std::runtime_error);
}

TEST(Checkpoint, BitExactRoundTripWithMasks) {
  ModelGraph g = build_mdunet(small(), 4);
  g.parameters()[0].frozen_mask[1] = 1;
  g.running_stats()[0].stats.mean[0] = 0.25f;
  const auto bytes = encode_checkpoint(checkpoint_from_graph(g));
  ModelGraph h = build_mdunet(small(), 99);
  restore_checkpoint(h, decode_checkpoint(bytes));
  for (std::size_t i = 0; i < g.parameters().size(); ++i) {
    EXPECT_EQ(g.parameters()[i].tensor, h.parameters()[i].tensor);
    EXPECT_EQ(g.parameters()[i].frozen_mask, h.parameters()[i].frozen_mask);
  }
  EXPECT_EQ(h.running_stats()[0].stats.mean[0], 0.25f);
  EXPECT_EQ(encode_checkpoint(checkpoint_from_graph(h)), bytes);
}

TEST(Checkpoint, SortedLayout) {
  Checkpoint c;
  c.tensors.push_back({"zeta", {2}, {1.0f, 2.0f}, std::nullopt});
  c.tensors.push_back({"alpha", {1, 1, 1, 3}, {1.0f, 2.0f, 3.0f}, std::vector<std::uint8_t>{1, 0, 1}});
  const auto bytes = encode_checkpoint(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "MDUCKPT1");
  // version, count, then the first name length and name.
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 5);
  EXPECT_EQ(std::string(bytes.begin() + 18, bytes.begin() + 23), "alpha");
  const Checkpoint d = decode_checkpoint(bytes);
  ASSERT_EQ(d.tensors.size(), 2U);
  EXPECT_EQ(d.tensors[0], c.tensors[1]);
  EXPECT_EQ(d.tensors[1], c.tensors[0]);
}

TEST(Checkpoint, CorruptionMagicVersionAndMissing) {
  const ModelGraph g = build_mdunet(small(), 1);
  auto bytes = encode_checkpoint(checkpoint_from_graph(g));
  for (std::size_t pos : {std::size_t{9}, bytes.size() / 2, bytes.size() - 5}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError) << pos;
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);

  Checkpoint c;
  c.tensors.push_back({"a", {1}, {1.0f}, std::nullopt});
  auto v2 = encode_checkpoint(c);
  v2[8] = 2;
  // Re-seal so only the version is wrong.
  const std::span<const std::uint8_t> payload(v2.data() + 8, v2.size() - 12);
  std::uint32_t crc = 0xFFFFFFFFu;
  for (auto byte : payload) {
    crc ^= byte;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  crc ^= 0xFFFFFFFFu;
  std::memcpy(v2.data() + v2.size() - 4, &crc, 4);
  try {
    decode_checkpoint(v2);
    FAIL() << "version 2 accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  ModelGraph h = build_mdunet(small(), 1);
  EXPECT_THROW(restore_checkpoint(h, c), CheckpointError);
}

TEST(Checkpoint, HalfQuantizedFrozenSubsetInCodebook) {
  ModelGraph g = build_mdunet(small(), 6);
  QuantConfig q;
  auto params = quantizable_parameters(g, q);
  const QuantState st = apply_quant_step(params, QuantState{q.bits, {}}, 0.5);
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "half.ckpt", g);
  ModelGraph h = build_mdunet(small(), 7);
  load_checkpoint(dir / "half.ckpt", h);
  auto hp = quantizable_parameters(h, q);
  const std::vector<const Parameter*> view(hp.begin(), hp.end());
  EXPECT_TRUE(frozen_values_in_codebook(view, st));
  std::size_t frozen = 0;
  for (const auto* p : view) frozen += p->frozen_count();
  std::size_t expected = 0;
  for (const auto* p : params) expected += p->frozen_count();
  EXPECT_EQ(frozen, expected);
}

TEST(Config, DefaultsParseAndErrors) {
  const RunConfig d = parse_config("");
  EXPECT_EQ(d.arch.depth, 5);
  EXPECT_EQ(d.arch.base_channels, 32);
  EXPECT_DOUBLE_EQ(d.train.base_lr, 0.005);
  EXPECT_EQ(d.train.batch_size, 4);

  const RunConfig c = parse_config("# comment\ncross_mode = cross5  # trailing\nenc_dense = min\ndec_dense=mout\n"
                                   "lr_milestones = 100, 200\nquant_schedule = 0.5,1\nskip_batch_norm = true\n");
  EXPECT_EQ(c.arch.cross_mode, CrossMode::Cross5);
  EXPECT_TRUE(c.arch.enc_dense.multi);
  EXPECT_TRUE(c.arch.dec_dense.multi);
  EXPECT_EQ(c.train.lr_milestones, (std::vector<std::int64_t>{100, 200}));
  EXPECT_EQ(c.quant.schedule, (std::vector<double>{0.5, 1.0}));
  EXPECT_TRUE(c.quant.skip_batch_norm);

  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  EXPECT_EQ(message("depth = 5\nenc_dense = 9\n").rfind("line 2:", 0), 0U) << message("depth = 5\nenc_dense = 9\n");
  EXPECT_EQ(message("\nbogus = 1\n").rfind("line 2:", 0), 0U);
  EXPECT_EQ(message("depth = five\n").rfind("line 1:", 0), 0U);
  EXPECT_EQ(message("depth\n").rfind("line 1:", 0), 0U);
  EXPECT_EQ(message("depth = 3\ndepth = 4\n").rfind("line 2:", 0), 0U);
  EXPECT_NE(message("cross_mode = sideways\n"), "accepted");
}

TEST(Cli, UnknownCommandPrintsUsage) {
  std::string err;
  EXPECT_NE(run({"frobnicate"}, nullptr, &err), 0);
  EXPECT_NE(err.find("usage:"), std::string::npos);
  EXPECT_NE(run({}, nullptr, &err), 0);
}

TEST(Cli, DescribeDefaultAndComposites) {
  std::string out;
  ASSERT_EQ(run({"describe"}, &out), 0);
  EXPECT_NE(out.find("variant: U-Net"), std::string::npos);
  EXPECT_NE(out.find("params_total: 7765442"), std::string::npos);

  const fs::path dir = scratch("describe");
  std::set<std::string> totals;
  for (const char* body : {"enc_dense = 4\ncross_mode = cross5\n", "enc_dense = 4\ndec_dense = 4\n",
                           "cross_mode = cross5\ndec_dense = 4\n", "enc_dense = 4\ncross_mode = cross5\ndec_dense = 4\n"}) {
    std::ofstream(dir / "c.cfg") << body;
    ASSERT_EQ(run({"describe", "--config", (dir / "c.cfg").string(), "--dot", (dir / "g.dot").string()}, &out), 0);
    const auto pos = out.find("params_total: ");
    totals.insert(out.substr(pos, out.find('\n', pos) - pos));
    EXPECT_TRUE(fs::file_size(dir / "g.dot") > 0);
  }
  EXPECT_EQ(totals.size(), 4U);
}

TEST(Cli, TrainEvalPredictQuantize) {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "c.cfg") << "depth = 2\nbase_channels = 2\nmax_iterations = 50\nsynthetic_count = 8\n"
                                  "synthetic_size = 16\nsynthetic_test_count = 2\nretrain_iterations = 2\n";
  const std::string cfg = (dir / "c.cfg").string();
  const std::string ckpt = (dir / "m.ckpt").string();
  std::string out;
  std::string err;
  ASSERT_EQ(run({"train", "--config", cfg, "--synthetic", "--out", ckpt}, &out, &err), 0) << err;
  std::ifstream csv(ckpt + ".csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "iteration,lr,loss");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 50);
  const auto first = read_file(ckpt);

  ASSERT_EQ(run({"train", "--config", cfg, "--synthetic", "--out", (dir / "again.ckpt").string()}), 0);
  EXPECT_EQ(read_file(dir / "again.ckpt"), first);
  EXPECT_EQ(read_file(dir / "again.ckpt.csv"), read_file(ckpt + ".csv"));

  ASSERT_EQ(run({"eval", "--config", cfg, "--ckpt", ckpt, "--synthetic"}, &out, &err), 0) << err;
  EXPECT_EQ(out.rfind("mean_iou: ", 0), 0U);
  EXPECT_NE(out.find("\ndice: "), std::string::npos);

  save_pgm(dir / "img.pgm", Tensor(Shape{1, 1, 16, 16}, 0.2f));
  ASSERT_EQ(run({"predict", "--config", cfg, "--ckpt", ckpt, "--image", (dir / "img.pgm").string(), "--out",
                 (dir / "pred.pgm").string()},
                &out, &err),
            0)
      << err;
  const Tensor pred = load_pgm(dir / "pred.pgm");
  for (float v : pred.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);

  ASSERT_EQ(run({"quantize", "--config", cfg, "--ckpt", ckpt, "--out-prefix", (dir / "q").string()}, &out, &err), 0)
      << err;
  for (const char* f : {"q_0.5.ckpt", "q_0.75.ckpt", "q_1.ckpt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;

  EXPECT_EQ(run({"eval", "--config", cfg, "--ckpt", (dir / "missing.ckpt").string(), "--synthetic"}, &out, &err), 1);
  EXPECT_EQ(std::count(err.begin(), err.end(), '\n'), 1);
  EXPECT_EQ(err.rfind("error: ", 0), 0U);
  EXPECT_NE(run({"train", "--config", cfg, "--out", ckpt}, &out, &err), 0);
}
