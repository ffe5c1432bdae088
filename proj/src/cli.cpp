#include "mdunet/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mdunet/checkpoint.hpp"
#include "mdunet/config.hpp"
#include "mdunet/dataset.hpp"
#include "mdunet/executor.hpp"
#include "mdunet/image_io.hpp"

namespace mdunet {
namespace {

constexpr const char* kUsage =
    "usage: mdunet <command> [options]\n"
    "commands:\n"
    "  describe  [--config F] [--size N] [--dot FILE]\n"
    "  train     [--config F] (--data DIR | --synthetic) --out CKPT [--history CSV]\n"
    "  eval      [--config F] --ckpt CKPT (--data DIR | --synthetic)\n"
    "  predict   [--config F] --ckpt CKPT --image PGM --out PGM\n"
    "  quantize  [--config F] --ckpt CKPT --out-prefix P [--data DIR | --synthetic]\n";

struct Options {
  std::string config;
  std::string data;
  bool synthetic = false;
  std::string out;
  std::string history;
  std::string ckpt;
  std::string image;
  std::string out_prefix;
  std::string dot;
  std::int64_t size = 64;
};

RunConfig config_of(const Options& o) { return o.config.empty() ? parse_config("") : load_config(o.config); }

ModelGraph model_of(const RunConfig& cfg) { return build_mdunet(cfg.arch, cfg.seed); }

Dataset train_data(const Options& o, const RunConfig& cfg) {
  if (!o.data.empty()) return load_dataset_dir(o.data);
  return synth_dataset(cfg.synthetic);
}

Dataset test_data(const Options& o, const RunConfig& cfg) {
  if (!o.data.empty()) return load_dataset_dir(o.data);
  SyntheticSpec spec = cfg.synthetic;
  spec.count = cfg.synthetic_test_count;
  spec.seed = cfg.synthetic.seed + 1;
  return synth_dataset(spec);
}

void require_source(const Options& o) {
  if (o.data.empty() == !o.synthetic) throw std::invalid_argument("exactly one of --data or --synthetic is required");
}

std::string fraction_tag(double f) {
  std::ostringstream os;
  os << f;
  return os.str();
}

int cmd_describe(const Options& o, std::ostream& out) {
  const RunConfig cfg = config_of(o);
  const ModelGraph g = model_of(cfg);
  const Shape input{1, cfg.arch.input_channels, o.size, o.size};
  const auto shapes = shape_infer(g, input);
  out << "variant: " << cfg.arch.variant_name() << '\n';
  out << "input: " << input.str() << '\n';
  out << "nodes:\n";
  for (const auto& n : g.nodes()) {
    out << "  " << std::setw(4) << n.id.value << "  " << std::left << std::setw(28) << n.name << std::setw(15)
        << to_string(n.kind) << std::right << shapes[n.id.value].str() << '\n';
  }
  const auto pc = param_count(g);
  out << "params_total: " << pc.total << '\n';
  out << "params_baseline: " << pc.baseline << '\n';
  out << "params_dense_encoder: " << pc.dense_encoder << '\n';
  out << "params_dense_decoder: " << pc.dense_decoder << '\n';
  out << "params_cross: " << pc.cross << '\n';
  if (!o.dot.empty()) {
    std::ofstream f(o.dot);
    if (!f) throw std::runtime_error("cannot write " + o.dot);
    f << export_dot(g, input);
  }
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  require_source(o);
  const RunConfig cfg = config_of(o);
  ModelGraph g = model_of(cfg);
  const Dataset data = train_data(o, cfg);
  const TrainResult r = train_loop(g, data, cfg.train);
  const std::string history = o.history.empty() ? o.out + ".csv" : o.history;
  std::ofstream csv(history, std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + history);
  write_history_csv(csv, r.history);
  save_checkpoint(o.out, g);
  out << "iterations: " << r.history.size() << '\n';
  if (!r.history.empty()) out << "final_loss: " << r.history.back().loss << '\n';
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  require_source(o);
  const RunConfig cfg = config_of(o);
  ModelGraph g = model_of(cfg);
  load_checkpoint(o.ckpt, g);
  out << format_metrics(evaluate(g, test_data(o, cfg)));
  return 0;
}

int cmd_predict(const Options& o, std::ostream& out) {
  const RunConfig cfg = config_of(o);
  ModelGraph g = model_of(cfg);
  load_checkpoint(o.ckpt, g);
  const Tensor image = load_pgm(o.image);
  const Tensor logits = forward(g, image, Mode::Infer);
  const auto mask = predict_mask(logits);
  save_mask_pgm(o.out, mask, image.shape().h, image.shape().w);
  std::size_t fg = 0;
  for (auto m : mask) fg += m;
  out << "foreground_pixels: " << fg << '\n';
  return 0;
}

int cmd_quantize(const Options& o, std::ostream& out) {
  if (!o.data.empty() && o.synthetic) throw std::invalid_argument("--data and --synthetic are mutually exclusive");
  const RunConfig cfg = config_of(o);
  ModelGraph g = model_of(cfg);
  load_checkpoint(o.ckpt, g);
  const Dataset data = train_data(o, cfg);
  auto retrain = [&](std::size_t step) {
    TrainConfig tc = cfg.train;
    tc.max_iterations = cfg.quant.retrain_iterations;
    tc.lr_milestones.clear();
    tc.seed = cfg.train.seed + step + 1;
    if (tc.max_iterations > 0) train_loop(g, data, tc);
  };
  auto snapshot = [&](std::size_t, const InqSnapshot& s, const QuantState&) {
    const std::string path = o.out_prefix + "_" + fraction_tag(s.fraction) + ".ckpt";
    save_checkpoint(path, g);
    out << "fraction: " << s.fraction << " frozen: " << s.frozen << '/' << s.total << " checksum: " << std::hex
        << s.frozen_checksum << std::dec << " -> " << path << '\n';
  };
  const InqResult r = run_inq_schedule(g, cfg.quant, retrain, snapshot);
  if (r.error) throw std::runtime_error("quantization stopped: " + *r.error);
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  static const std::vector<std::string> known = {"describe", "train", "eval", "predict", "quantize"};
  if (args.empty() || std::find(known.begin(), known.end(), args.front()) == known.end()) {
    if (!args.empty() && (args.front() == "-h" || args.front() == "--help")) {
      out << kUsage;
      return 0;
    }
    if (!args.empty()) err << "error: unknown command '" << args.front() << "'\n";
    err << kUsage;
    return 2;
  }

  CLI::App app{"Multi-scale densely connected U-Net toolkit", "mdunet"};
  app.require_subcommand(1);
  Options o;
  auto* describe = app.add_subcommand("describe", "Print variant, shapes and parameter counts");
  describe->add_option("--config", o.config, "Config file");
  describe->add_option("--size", o.size, "Input height and width for shape inference");
  describe->add_option("--dot", o.dot, "Write the graph as DOT");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", o.config, "Config file");
  train->add_option("--data", o.data, "Dataset directory with images/ and masks/");
  train->add_flag("--synthetic", o.synthetic, "Use the synthetic blob dataset");
  train->add_option("--out", o.out, "Checkpoint to write")->required();
  train->add_option("--history", o.history, "Loss history CSV (default: <out>.csv)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--config", o.config, "Config file");
  eval->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  eval->add_option("--data", o.data, "Dataset directory");
  eval->add_flag("--synthetic", o.synthetic, "Use the held-out synthetic split");

  auto* predict = app.add_subcommand("predict", "Predict a mask for one image");
  predict->add_option("--config", o.config, "Config file");
  predict->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  predict->add_option("--image", o.image, "Input PGM")->required();
  predict->add_option("--out", o.out, "Output mask PGM")->required();

  auto* quantize = app.add_subcommand("quantize", "Run the incremental quantization schedule");
  quantize->add_option("--config", o.config, "Config file");
  quantize->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  quantize->add_option("--out-prefix", o.out_prefix, "Prefix for per-fraction checkpoints")->required();
  quantize->add_option("--data", o.data, "Retraining dataset (default: synthetic)");
  quantize->add_flag("--synthetic", o.synthetic, "Retrain on the synthetic dataset");

  std::vector<std::string> argv_store{"mdunet"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.get_subcommands().front()->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (describe->parsed()) return cmd_describe(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (predict->parsed()) return cmd_predict(o, out);
    return cmd_quantize(o, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
}

}  // namespace mdunet
