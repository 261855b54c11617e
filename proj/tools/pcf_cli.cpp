#include <iostream>

#include "CLI11.hpp"
#include "pcf/commands.hpp"

using namespace pcf;

int main(int argc, char** argv) {
  CLI::App app{"pcf: point convolution kernels, training and checks"};
  app.require_subcommand(1);

  cmd::GenOptions gen;
  std::string geometry = to_string(gen.spec.geometry);
  auto* g = app.add_subcommand("gen-data", "write synthetic labelled scenes");
  g->add_option("--geometry", geometry, "two_planes_corner, plane_plus_sphere or boundary_noise")
      ->capture_default_str();
  g->add_option("--num-points", gen.spec.num_points)->capture_default_str();
  g->add_option("--noise-sigma", gen.spec.noise_sigma)->capture_default_str();
  g->add_option("--flip-rate", gen.spec.boundary_label_flip_rate)->capture_default_str();
  g->add_option("--band-width", gen.spec.band_width)->capture_default_str();
  g->add_option("--color-noise", gen.spec.color_noise)->capture_default_str();
  g->add_option("--seed", gen.spec.seed, "scene i uses seed + i")->capture_default_str();
  g->add_option("--count", gen.count, "scenes to write")
      ->capture_default_str();
  g->add_option("--out", gen.out, "a .pcf file, or a directory for scene_NNNN.pcf files")->required();

  cmd::TrainOptions tr;
  auto* t = app.add_subcommand("train", "train a network; prints epoch,loss,lr,miou");
  t->add_option("--config", tr.config)->required();
  t->add_option("--data", tr.data, "directory of .pcf training scenes")->required();
  t->add_option("--eval-data", tr.eval_data, "directory scored each epoch (default: training data)");
  t->add_option("--out", tr.out, "checkpoint path")->required();

  std::string ev_ckpt, ev_data;
  auto* e = app.add_subcommand("eval", "per-class IoU and mean on a directory of scenes");
  e->add_option("--checkpoint", ev_ckpt)->required();
  e->add_option("--data", ev_data)->required();

  std::string suite;
  std::uint64_t check_seed = 0;
  auto* c = app.add_subcommand("check", "run a self-check suite; exit 0 iff every row passes");
  c->add_option("--suite", suite)->required()->check(CLI::IsMember({"gradcheck", "oracle", "invariance"}));
  c->add_option("--seed", check_seed)->capture_default_str();

  cmd::BenchOptions bench;
  auto* b = app.add_subcommand("bench", "median wall clock per op as CSV");
  b->add_option("--op", bench.op)->check(CLI::IsMember({"pcf", "pointconv", "knn"}))->capture_default_str();
  b->add_option("--n", bench.n, "point counts")->delimiter(',');
  b->add_option("--k", bench.k)->capture_default_str();
  b->add_option("--reps", bench.reps)->capture_default_str();
  b->add_option("--c-in", bench.c_in)->capture_default_str();
  b->add_option("--c-out", bench.c_out)->capture_default_str();
  b->add_option("--c-mid", bench.c_mid)->capture_default_str();
  b->add_option("--heads", bench.heads)->capture_default_str();
  b->add_option("--seed", bench.seed)->capture_default_str();

  std::string sc_ckpt, sc_data, sc_out;
  std::size_t sc_layer = 0;
  auto* s = app.add_subcommand("scores", "per-point score difference of one layer");
  s->add_option("--checkpoint", sc_ckpt)->required();
  s->add_option("--data", sc_data, "a single .pcf file")->required();
  s->add_option("--layer", sc_layer)->capture_default_str();
  s->add_option("--out", sc_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) {
      gen.spec.geometry = parse_geometry(geometry);
      for (const auto& p : cmd::gen_data(gen)) std::cout << p << '\n';
    } else if (*t) {
      cmd::train_cmd(tr, std::cout, std::cerr);
    } else if (*e) {
      cmd::eval_cmd(ev_ckpt, ev_data, std::cout);
    } else if (*c) {
      return cmd::check_cmd(suite, check_seed, std::cout) ? 0 : 1;
    } else if (*b) {
      cmd::bench_cmd(bench, std::cout);
    } else if (*s) {
      cmd::scores_cmd(sc_ckpt, sc_data, sc_layer, sc_out);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 2;
  }
  return 0;
}
