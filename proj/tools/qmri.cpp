// qmri: command-line driver for the individual stages and the full retrospective run.
//
// Tensors sit next to their sidecars: V.tnsr/V.json, x.masks.tnsr/x.json for patterns,
// dictionaries default to grid.json in the same directory.

#include "qmri/pipeline.hpp"
#include "qmri/spline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>

namespace fs = std::filesystem;
using namespace qmri;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  unsigned threads = 1;
  fs::path out_dir = ".";
};

fs::path sibling_json(fs::path tensor) { return tensor.replace_extension(".json"); }

// An explicit path wins, otherwise name under --out-dir.
fs::path output(const fs::path& given, const Globals& g, const std::string& name) {
  fs::path p = given.empty() ? g.out_dir / name : given;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

ExperimentConfig load_config(const fs::path& path, const Globals& g) {
  auto cfg = load_experiment(path);
  if (g.seed_set) {
    cfg.seed = g.seed;
    cfg.training.seed = derive_seed(g.seed, stage_training);
  }
  return cfg;
}

Dictionary load_dict(const fs::path& tensor, const fs::path& grid) {
  return load_dictionary(tensor, grid.empty() ? tensor.parent_path() / "grid.json" : grid);
}

SubspaceModel load_v(const fs::path& tensor) { return load_subspace(tensor, sibling_json(tensor)); }

void write_csv(const fs::path& path, const RMatrix& m, const std::string& header = "") {
  std::ofstream f(path);
  require(f.good(), ErrorCode::io, "cannot write " + path.string());
  f << std::setprecision(17);
  if (!header.empty()) f << header << "\n";
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) f << (c ? "," : "") << m(r, c);
    f << "\n";
  }
}

std::vector<Index> parse_levels(const std::string& s, Index depth) {
  std::vector<Index> out;
  if (s == "all") {
    for (Index i = 1; i <= depth; ++i) out.push_back(i);
    out.push_back(kEndLevel);
    return out;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "end") {
      out.push_back(kEndLevel);
      continue;
    }
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == tok.size() && used > 0, ErrorCode::config, "bad level '" + tok + "' (use all, end or block numbers)");
    require(v >= 1 && v <= depth, ErrorCode::config, "level " + tok + " outside 1.." + std::to_string(depth));
    out.push_back(v);
  }
  return out;
}

std::size_t axis_index(const std::vector<double>& axis, double v) {
  const double hit = nearest_on_axis(axis, v);
  return static_cast<std::size_t>(std::find(axis.begin(), axis.end(), hit) - axis.begin());
}

double parse_snr(const std::string& s) {
  if (s == "inf" || s == "none") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::config, "--snr must be a number of dB or inf");
}

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::config: return 2;
    case ErrorCode::numerical: return 3;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantitative MRI pipeline: dictionaries, subspace reconstruction, inference and spline analysis"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Default output directory");

  // simulate-dict
  fs::path sd_config, sd_out, sd_grid;
  auto* sd = app.add_subcommand("simulate-dict", "Simulate the fingerprint dictionary over the T1/T2 grid");
  sd->add_option("--config", sd_config, "Experiment config")->required();
  sd->add_option("--out", sd_out, "Dictionary tensor (default <out-dir>/dict.tnsr)");
  sd->add_option("--grid", sd_grid, "Grid sidecar (default grid.json next to the tensor)");

  // fit-subspace
  fs::path fs_dict, fs_grid, fs_out;
  Index fs_rank = 10;
  auto* fsub = app.add_subcommand("fit-subspace", "PCA subspace of a dictionary");
  fsub->add_option("--dict", fs_dict, "Dictionary tensor")->required();
  fsub->add_option("--grid", fs_grid, "Grid sidecar (default grid.json next to the dictionary)");
  fsub->add_option("--s,--rank", fs_rank, "Subspace rank")->check(CLI::PositiveNumber);
  fsub->add_option("--out", fs_out, "Basis tensor (default <out-dir>/V.tnsr, eigenvalues go to V.json)");

  // make-phantom
  fs::path mp_config, mp_dict, mp_out;
  auto* mp = app.add_subcommand("make-phantom", "Rasterise the phantom maps");
  mp->add_option("--config", mp_config, "Experiment config")->required();
  mp->add_option("--dict", mp_dict, "Dictionary tensor, for snapping region values to the grid");
  mp->add_option("--out", mp_out, "Maps directory (default <out-dir>/gt)");

  // synth-kspace
  fs::path sk_config, sk_tsmi, sk_maps, sk_v, sk_pattern, sk_out, sk_tsmi_out;
  std::string sk_snr;
  auto* sk = app.add_subcommand("synth-kspace", "TSMI -> undersampled noisy k-space");
  sk->add_option("--config", sk_config, "Experiment config (sampling and sequence sections)");
  auto* sk_t = sk->add_option("--tsmi", sk_tsmi, "TSMI tensor (s x H x W)");
  auto* sk_m = sk->add_option("--maps", sk_maps, "Ground-truth maps directory, simulated into a TSMI");
  sk_t->excludes(sk_m);
  sk->add_option("--v", sk_v, "Subspace tensor")->required();
  sk->add_option("--pattern", sk_pattern, "Sampling pattern json; generated from --config when absent");
  sk->add_option("--snr", sk_snr, "SNR in dB or inf (default from --config)");
  sk->add_option("--out", sk_out, "k-space samples tensor (default <out-dir>/y.tnsr)");
  sk->add_option("--tsmi-out", sk_tsmi_out, "Where to write the TSMI built from --maps (default <out-dir>/x_true.tnsr)");

  // recon
  fs::path rc_config, rc_v, rc_pattern, rc_y, rc_out, rc_report;
  std::string rc_method = "lrtv";
  auto* rc = app.add_subcommand("recon", "Reconstruct the TSMI from k-space");
  rc->add_option("--method", rc_method, "zf, lr or lrtv")->check(CLI::IsMember({"zf", "lr", "lrtv"}));
  rc->add_option("--config", rc_config, "Experiment config (recon section)");
  rc->add_option("--v", rc_v, "Subspace tensor")->required();
  rc->add_option("--pattern", rc_pattern, "Sampling pattern json")->required();
  rc->add_option("--y", rc_y, "k-space samples tensor")->required();
  rc->add_option("--out", rc_out, "TSMI tensor (default <out-dir>/x_<method>.tnsr)");
  rc->add_option("--report", rc_report, "Solver report json (default <out-dir>/report_<method>.json)");

  // train
  fs::path tr_config, tr_dict, tr_grid, tr_v, tr_out;
  std::string tr_target = "encoder";
  auto* tr = app.add_subcommand("train", "Train the encoder, decoder or kernel machines");
  tr->add_option("--target", tr_target, "encoder, decoder or km")->check(CLI::IsMember({"encoder", "decoder", "km"}));
  tr->add_option("--config", tr_config, "Experiment config (training section)")->required();
  tr->add_option("--dict", tr_dict, "Dictionary tensor")->required();
  tr->add_option("--grid", tr_grid, "Grid sidecar");
  tr->add_option("--v", tr_v, "Subspace tensor")->required();
  tr->add_option("--out", tr_out, "Model manifest; layer tensors are written beside it (default <out-dir>/<target>.json)");

  // infer
  fs::path in_x, in_dict, in_grid, in_v, in_enc, in_dec, in_km_enc, in_km_dec, in_out;
  std::string in_method = "dm";
  std::vector<double> in_dec_scale{1.0, 1.0};
  auto* inf = app.add_subcommand("infer", "Parameter maps from a TSMI");
  inf->add_option("--method", in_method, "dm, net or km")->check(CLI::IsMember({"dm", "net", "km"}));
  inf->add_option("--x", in_x, "TSMI tensor (s x H x W)")->required();
  inf->add_option("--dict", in_dict, "Dictionary tensor (dm)");
  inf->add_option("--grid", in_grid, "Grid sidecar (dm)");
  inf->add_option("--v", in_v, "Subspace tensor (dm)");
  inf->add_option("--encoder", in_enc, "Encoder manifest (net)");
  inf->add_option("--decoder", in_dec, "Decoder manifest (net)");
  inf->add_option("--km-encoder", in_km_enc, "KM encoder manifest (km)");
  inf->add_option("--km-decoder", in_km_dec, "KM decoder manifest (km)");
  inf->add_option("--decoder-input-scale", in_dec_scale, "KM decoder input scale in ms (km)")->expected(2);
  inf->add_option("--out", in_out, "Maps directory (default <out-dir>/maps_<method>)");

  // metrics
  fs::path mt_pred, mt_truth, mt_out;
  auto* mt = app.add_subcommand("metrics", "Compare predicted maps with ground truth");
  mt->add_option("--pred", mt_pred, "Predicted maps directory")->required();
  mt->add_option("--truth", mt_truth, "Ground-truth maps directory")->required();
  mt->add_option("--out", mt_out, "Output json (default <out-dir>/metrics.json)");

  // analyze-spline
  fs::path as_net, as_dict, as_grid, as_v, as_out;
  std::string as_levels = "all";
  Index as_k = 50;
  double as_t1 = 1000.0, as_t2 = 100.0;
  auto* as = app.add_subcommand("analyze-spline", "Affine-spline partitions and matched filters of an encoder");
  as->add_option("--net", as_net, "Encoder manifest")->required();
  as->add_option("--dict", as_dict, "Dictionary tensor")->required();
  as->add_option("--grid", as_grid, "Grid sidecar");
  as->add_option("--v", as_v, "Subspace tensor")->required();
  as->add_option("--levels", as_levels, "all, end or a comma list of block numbers");
  as->add_option("--k", as_k, "k-means clusters")->check(CLI::PositiveNumber);
  as->add_option("--filter-t1", as_t1, "T1 (ms) of the atom used for matched filters");
  as->add_option("--filter-t2", as_t2, "T2 (ms) of the atom used for matched filters");
  as->add_option("--out", as_out, "Atlas directory (default <out-dir>/atlas)");

  // run-retrospective
  fs::path rr_config;
  auto* rr = app.add_subcommand("run-retrospective", "Full phantom experiment, artifacts under --out-dir");
  rr->add_option("--config", rr_config, "Experiment config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  g.seed_set = seed_opt->count() > 0;
  set_threads(g.threads);

  try {
    fs::create_directories(g.out_dir);

    if (*sd) {
      const auto cfg = load_config(sd_config, g);
      const auto dict = build_experiment_dictionary(cfg);
      const fs::path t = output(sd_out, g, "dict.tnsr");
      save_dictionary(t, sd_grid.empty() ? t.parent_path() / "grid.json" : output(sd_grid, g, ""), dict);
      std::cout << "dictionary: " << dict.size() << " atoms, " << dict.frames() << " frames\n";
    } else if (*fsub) {
      const auto dict = load_dict(fs_dict, fs_grid);
      const auto v = fit_subspace(dict, fs_rank);
      const fs::path t = output(fs_out, g, "V.tnsr");
      save_subspace(t, sibling_json(t), v);
      std::cout << "subspace rank " << v.rank() << ", energy " << v.energy_fraction << "\n";
    } else if (*mp) {
      const auto cfg = load_config(mp_config, g);
      auto regions = cfg.phantom.use_default ? default_phantom(cfg.sampling.height, cfg.sampling.width)
                                             : cfg.phantom.regions;
      if (!mp_dict.empty() && cfg.phantom.snap_to_grid) regions = snap_regions(regions, load_dict(mp_dict, {}));
      const auto maps = make_phantom(regions, cfg.sampling.height, cfg.sampling.width);
      const fs::path dir = output(mp_out, g, "gt");
      export_maps(dir, maps);
      std::cout << "phantom: " << regions.size() << " regions on " << maps.height << "x" << maps.width << "\n";
    } else if (*sk) {
      require(!sk_tsmi.empty() || !sk_maps.empty(), ErrorCode::config, "synth-kspace needs --tsmi or --maps");
      std::optional<ExperimentConfig> cfg;
      if (!sk_config.empty()) cfg = load_config(sk_config, g);
      const auto v = load_v(sk_v);
      Tsmi x;
      if (!sk_tsmi.empty()) {
        x = tsmi_from_tensor(read_tensor(sk_tsmi));
      } else {
        require(cfg.has_value(), ErrorCode::config, "synth-kspace --maps needs --config for the sequence");
        x = maps_to_tsmi(load_maps(sk_maps), cfg->sequence.build(), v, cfg->sequence.epg_states);
        write_tensor(output(sk_tsmi_out, g, "x_true.tnsr"), tsmi_tensor(x));
      }
      SamplingPattern pattern;
      if (!sk_pattern.empty() && fs::exists(sk_pattern)) {
        pattern = load_pattern(sk_pattern);
      } else {
        require(cfg.has_value(), ErrorCode::config, "synth-kspace needs --config to generate a sampling pattern");
        const auto& s = cfg->sampling;
        require(s.height == x.height && s.width == x.width, ErrorCode::config,
                "sampling.height/width do not match the TSMI");
        pattern = make_pattern(x.height, x.width, v.frames(), s.fraction, s.scheme,
                               derive_seed(cfg->seed, stage_pattern), s.density_sigma);
        save_pattern(output(sk_pattern, g, "pattern.json"), pattern);
      }
      double snr = std::numeric_limits<double>::infinity();
      if (!sk_snr.empty()) snr = parse_snr(sk_snr);
      else if (cfg) snr = cfg->sampling.snr_db;
      const std::uint64_t noise_seed = derive_seed(cfg ? cfg->seed : g.seed, stage_noise);
      auto data = apply_forward(v, x, pattern);
      if (std::isfinite(snr)) data = add_noise(data, snr, noise_seed);
      write_tensor(output(sk_out, g, "y.tnsr"), tensor_from(data.samples));
      std::cout << "k-space: " << data.samples.size() << " samples, undersampling " << pattern.undersampling << "\n";
    } else if (*rc) {
      const auto v = load_v(rc_v);
      const auto pattern = load_pattern(rc_pattern);
      const auto data = kspace_from_samples(pattern, to_cmatrix(read_tensor(rc_y)).col(0));
      Tsmi x;
      if (rc_method == "zf") {
        x = zero_fill(v, data);
      } else {
        LrtvConfig lc = rc_config.empty() ? LrtvConfig{} : load_config(rc_config, g).recon;
        if (rc_method == "lr") lc.lambda = {0.0};
        auto [sol, rep] = lrtv(v, data, lc);
        x = std::move(sol);
        write_json(output(rc_report, g, "report_" + rc_method + ".json"), report_json(rep));
        std::cout << rc_method << ": " << rep.iterations_run << " iterations, objective "
                  << rep.objective_per_iter.back() << "\n";
      }
      write_tensor(output(rc_out, g, "x_" + rc_method + ".tnsr"), tsmi_tensor(x));
    } else if (*tr) {
      const auto cfg = load_config(tr_config, g);
      const auto dict = load_dict(tr_dict, tr_grid);
      const auto v = load_v(tr_v);
      const auto& tc = cfg.training;
      fs::path manifest = output(tr_out, g, tr_target + ".json");
      manifest.replace_extension(".json");
      if (tr_target == "km") {
        const auto m = train_models(dict, v, tc, cfg.km, false, true, derive_seed(cfg.seed, stage_km), &std::cout);
        const std::string stem = manifest.stem().string();
        save_km(manifest.parent_path() / (stem + "_encoder.json"), m.km_encoder);
        save_km(manifest.parent_path() / (stem + "_decoder.json"), m.km_decoder);
      } else {
        const auto ts = make_training_set(dict, v, tc);
        if (tr_target == "encoder") {
          auto enc = init_encoder(v.rank(), tc.width, tc.blocks, to_rvector(tc.target_scale_ms),
                                  ts.encoder.labels.rowwise().mean(), derive_seed(tc.seed, 11));
          const auto res = train(enc, ts.encoder.inputs, ts.encoder.labels, tc);
          save_encoder(manifest, enc);
          std::cout << "encoder: " << enc.parameter_count() << " parameters, final mse " << res.epoch_mse.back()
                    << ", label mismatch " << ts.encoder.mismatch_fraction() << "\n";
        } else {
          auto dec = init_decoder(2, tc.decoder_hidden, v.rank(), to_rvector(tc.decoder_input_scale_ms),
                                  derive_seed(tc.seed, 12));
          dec.target_phase = ts.decoder_phase;
          const auto res = train(dec, ts.decoder_inputs, ts.decoder_targets, tc);
          save_decoder(manifest, dec);
          std::cout << "decoder: " << dec.parameter_count() << " parameters, final mse " << res.epoch_mse.back()
                    << "\n";
        }
      }
    } else if (*inf) {
      const Tsmi x = tsmi_from_tensor(read_tensor(in_x));
      QuantMaps m;
      if (in_method == "dm") {
        require(!in_dict.empty() && !in_v.empty(), ErrorCode::config, "infer --method dm needs --dict and --v");
        m = dict_match(compress_dictionary(load_dict(in_dict, in_grid), load_v(in_v)), x);
      } else if (in_method == "net") {
        require(!in_enc.empty() && !in_dec.empty(), ErrorCode::config, "infer --method net needs --encoder and --decoder");
        m = net_infer(load_encoder(in_enc), load_decoder(in_dec), x);
      } else {
        require(!in_km_enc.empty() && !in_km_dec.empty(), ErrorCode::config,
                "infer --method km needs --km-encoder and --km-decoder");
        m = km_infer_maps(load_km(in_km_enc), load_km(in_km_dec), to_rvector(in_dec_scale), x);
      }
      const fs::path dir = output(in_out, g, "maps_" + in_method);
      export_maps(dir, m);
      std::cout << "maps written to " << dir.string() << "\n";
    } else if (*mt) {
      const auto r = map_metrics(load_maps(mt_pred), load_maps(mt_truth)).to_json();
      write_json(output(mt_out, g, "metrics.json"), r);
      std::cout << r.dump(2) << "\n";
    } else if (*as) {
      const auto net = load_encoder(as_net);
      const auto dict = load_dict(as_dict, as_grid);
      const auto v = load_v(as_v);
      const RMatrix samples = network_inputs(compress(v, dict.atoms));
      const fs::path dir = output(as_out, g, "atlas");
      fs::create_directories(dir);
      const auto levels = parse_levels(as_levels, net.depth());
      const auto rep = hierarchy_report(net, samples);
      RMatrix counts(static_cast<Index>(rep.level_counts.size()), 2);
      for (std::size_t i = 0; i < rep.level_counts.size(); ++i)
        counts.row(static_cast<Index>(i)) << static_cast<double>(i + 1), static_cast<double>(rep.level_counts[i]);
      write_csv(dir / "counts.csv", counts, "block,patterns");
      const RMatrix pts = pca_coordinates(samples);
      for (Index level : levels) {
        const auto atlas = build_atlas(net, samples, std::min(as_k, samples.cols()), level, derive_seed(g.seed, 6));
        const std::string tag = level == kEndLevel ? "end" : "block" + std::to_string(level);
        RMatrix labelled(samples.cols(), 4);
        for (Index c = 0; c < samples.cols(); ++c)
          labelled.row(c) << pts(0, c), pts.rows() > 1 ? pts(1, c) : 0.0, pts.rows() > 2 ? pts(2, c) : 0.0,
              static_cast<double>(atlas.labels[static_cast<std::size_t>(c)]);
        write_csv(dir / ("labels_" + tag + ".csv"), labelled, "pc1,pc2,pc3,label");
        write_csv(dir / ("centroids_" + tag + ".csv"), atlas.centroids);
        std::cout << tag << ": " << atlas.distinct_patterns << " patterns, " << atlas.centroids.rows()
                  << " clusters (" << atlas.empty_clusters << " empty)\n";
      }
      const Index j = dict.column(axis_index(dict.t1_axis, as_t1), axis_index(dict.t2_axis, as_t2));
      const CMatrix filt = matched_filters(net, v, samples.col(j));
      RMatrix f(filt.rows(), 2 * filt.cols());
      f << filt.real(), filt.imag();
      write_csv(dir / "filters.csv", f, "t1_re,t2_re,t1_im,t2_im");
    } else if (*rr) {
      const auto cfg = load_config(rr_config, g);
      const auto res = run_retrospective(cfg, g.out_dir, &std::cout);
      std::cout << res.metrics.dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
