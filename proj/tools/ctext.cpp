#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>

#include "customtext/evaluate.hpp"
#include "customtext/gateway.hpp"
#include "customtext/io.hpp"

#include <httplib.h>

using namespace customtext;
namespace fs = std::filesystem;

namespace {

// Everything needed to rerun a command: arguments, seeds, and content hashes
// of inputs and outputs. No timestamps, so identical runs write identical
// records.
struct Record {
  nlohmann::json doc = nlohmann::json::object();

  Record(const std::string& command, int argc, char** argv) {
    doc["command"] = command;
    doc["argv"] = std::vector<std::string>(argv + 1, argv + argc);
    doc["inputs"] = nlohmann::json::object();
    doc["outputs"] = nlohmann::json::object();
  }
  void input(const std::string& role, const fs::path& p) {
    doc["inputs"][role] = {{"path", p.string()}, {"sha256", fs::is_regular_file(p) ? io::sha256_file(p) : ""}};
  }
  void output(const std::string& role, const fs::path& p) {
    doc["outputs"][role] = {{"path", p.string()}, {"sha256", io::sha256_file(p)}};
  }
  void write(const fs::path& path) const {
    io::write_text(path, doc.dump(2) + "\n");
    std::cerr << "record: " << path.string() << "\n";
  }
};

fs::path record_path(const fs::path& out) { return fs::path(out.string() + ".record.json"); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::function<void(int, double)> progress(const std::string& what, int every) {
  auto t0 = std::chrono::steady_clock::now();
  return [what, every, t0](int step, double loss) {
    if (step % every) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "%s step %d loss %.6f (%.1fs)\n", what.c_str(), step, loss, s);
  };
}

struct TrainArgs {
  std::string data;
  std::string out;
  int steps = 1000;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 100;
};

void add_train_args(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--data", a.data, "Dataset directory (from `dataset gen`)")->required();
  cmd->add_option("--out", a.out, "Checkpoint to write")->required();
  cmd->add_option("--steps", a.steps, "Optimiser steps")->capture_default_str();
  cmd->add_option("--batch", a.batch, "Batch size")->capture_default_str();
  cmd->add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--seed", a.seed, "Training seed")->capture_default_str();
  cmd->add_option("--log-every", a.log_every, "Progress interval in steps")->capture_default_str();
}

diffusion::TrainOptions options_of(const TrainArgs& a, const std::string& what) {
  diffusion::TrainOptions o;
  o.steps = a.steps;
  o.batch = a.batch;
  o.lr = a.lr;
  o.seed = a.seed;
  o.on_step = progress(what, std::max(1, a.log_every));
  return o;
}

nlohmann::json train_json(const TrainArgs& a) {
  return {{"steps", a.steps}, {"batch", a.batch}, {"lr", a.lr}, {"seed", a.seed}};
}

void save_checkpoint(const ckpt::Checkpoint& c, const fs::path& out, Record& rec, const std::vector<double>& losses) {
  ensure_parent(out);
  ckpt::save(out, c);
  rec.output("checkpoint", out);
  if (!losses.empty()) {
    rec.doc["loss_first"] = losses.front();
    rec.doc["loss_last"] = losses.back();
  }
  rec.write(record_path(out));
}

diffusion::Vae load_vae(const std::string& path) {
  return diffusion::Vae::from_checkpoint(ckpt::load(path, "vae"));
}

gateway::GatewayConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  const fs::path p(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path + " is not JSON: " + e.what());
  }
  return gateway::GatewayConfig::from_json(doc, p.parent_path());
}

gateway::GatewayConfig load_config(const std::string& path, const gateway::ModelPaths& overrides) {
  auto c = load_config(path);
  auto pick = [](fs::path& dst, const fs::path& src) {
    if (!src.empty()) dst = src;
  };
  pick(c.models.vae, overrides.vae);
  pick(c.models.denoiser, overrides.denoiser);
  pick(c.models.enhancer, overrides.enhancer);
  pick(c.models.cm_backbone, overrides.cm_backbone);
  pick(c.models.cm_adapter, overrides.cm_adapter);
  return c;
}

void add_model_args(CLI::App* cmd, gateway::ModelPaths& m) {
  cmd->add_option("--vae", m.vae, "VAE checkpoint (overrides the config)");
  cmd->add_option("--denoiser", m.denoiser, "Denoiser checkpoint");
  cmd->add_option("--enhancer", m.enhancer, "Decoder enhancer checkpoint");
  cmd->add_option("--cm-backbone", m.cm_backbone, "Consistency backbone checkpoint");
  cmd->add_option("--cm-adapter", m.cm_adapter, "Consistency adapter checkpoint");
}

void record_models(Record& rec, const gateway::ModelPaths& m) {
  auto add = [&](const char* role, const fs::path& p) {
    if (!p.empty()) rec.input(role, p);
  };
  add("vae", m.vae);
  add("denoiser", m.denoiser);
  add("enhancer", m.enhancer);
  add("cm_backbone", m.cm_backbone);
  add("cm_adapter", m.cm_adapter);
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctext: synthetic text-rendering pipeline, training, evaluation and session service"};
  app.require_subcommand(1);

  // dataset gen ----------------------------------------------------------------
  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
  dataset->require_subcommand(1);
  auto* gen = dataset->add_subcommand("gen", "Render a synthetic dataset with manifest");
  evalkit::DatasetConfig dcfg;
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", dcfg.count, "Number of images")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();
  gen->add_option("--min-size", dcfg.min_size, "Smallest text size in px")->capture_default_str();
  gen->add_option("--max-size", dcfg.max_size, "Largest text size in px")->capture_default_str();
  gen->add_option("--canvas", dcfg.canvas, "Canvas size in px")->capture_default_str();

  // training -------------------------------------------------------------------
  TrainArgs vae_args;
  double kl_weight = 1e-4;
  auto* train_vae = app.add_subcommand("train-vae", "Train the image autoencoder");
  add_train_args(train_vae, vae_args);
  vae_args.lr = 2e-3;
  train_vae->add_option("--kl", kl_weight, "KL weight")->capture_default_str();

  TrainArgs den_args;
  std::string den_vae;
  int den_T = 50, den_width = 48;
  double cond_dropout = 0.1;
  auto* train_den = app.add_subcommand("train-denoiser", "Train the latent denoiser");
  add_train_args(train_den, den_args);
  train_den->add_option("--vae", den_vae, "VAE checkpoint")->required();
  train_den->add_option("--T", den_T, "Sampling steps of the respaced schedule")->capture_default_str();
  train_den->add_option("--width", den_width, "Denoiser channel width")->capture_default_str();
  train_den->add_option("--cond-dropout", cond_dropout, "Conditioning dropout rate")->capture_default_str();

  TrainArgs enh_args;
  std::string enh_vae;
  double kappa = 5.0;
  int enh_hidden = 16;
  auto* train_enh = app.add_subcommand("train-enhancer", "Train the patch-split decoder enhancer");
  add_train_args(train_enh, enh_args);
  train_enh->add_option("--vae", enh_vae, "VAE checkpoint")->required();
  train_enh->add_option("--kappa", kappa, "Character-pixel loss weight")->capture_default_str();
  train_enh->add_option("--hidden", enh_hidden, "Hidden width")->capture_default_str();

  TrainArgs cm_args;
  std::string cm_vae;
  consistency::Geometry geo;
  auto* pretrain = app.add_subcommand("pretrain-cm", "Consistency-train the decoder backbone");
  add_train_args(pretrain, cm_args);
  pretrain->add_option("--vae", cm_vae, "VAE checkpoint")->required();
  pretrain->add_option("--c1", geo.c1, "Full-resolution width")->capture_default_str();
  pretrain->add_option("--c2", geo.c2, "Half-resolution width")->capture_default_str();

  TrainArgs ad_args;
  std::string ad_vae, ad_backbone;
  int mask_dim = 8;
  auto* train_ad = app.add_subcommand("train-adapter", "Train the character-mask adapter on a frozen backbone");
  add_train_args(train_ad, ad_args);
  train_ad->add_option("--vae", ad_vae, "VAE checkpoint")->required();
  train_ad->add_option("--backbone", ad_backbone, "Backbone checkpoint (from pretrain-cm)")->required();
  train_ad->add_option("--mask-dim", mask_dim, "Character embedding width")->capture_default_str();

  // generate -------------------------------------------------------------------
  std::string cfg_path, prompt, gen_img_out, decoder = "vanilla", attrs_json, session_dir;
  std::uint64_t seed = 0;
  gateway::ModelPaths gen_models;
  auto* generate = app.add_subcommand("generate", "Generate one image from a prompt");
  generate->add_option("--config", cfg_path, "Gateway config JSON (canvas, steps, model paths)");
  add_model_args(generate, gen_models);
  generate->add_option("--prompt", prompt, "Prompt with the text in single quotes")->required();
  generate->add_option("--attrs", attrs_json, "JSON array of per-span attributes");
  generate->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  generate->add_option("--decoder", decoder, "vanilla | enhance | consistency")->capture_default_str();
  generate->add_option("--out", gen_img_out, "PNG to write")->required();
  generate->add_option("--session-dir", session_dir, "Keep the session records here (default: next to --out)");

  // eval -----------------------------------------------------------------------
  std::string eval_data, eval_pred, eval_out, method, eval_cfg;
  std::string eval_decoder = "vanilla";
  bool small_only = false;
  int cm_steps = 1;
  std::uint64_t eval_seed = 0;
  gateway::ModelPaths eval_models;
  auto* eval = app.add_subcommand("eval", "Score predictions or decoder reconstructions against a dataset");
  eval->add_option("--data", eval_data, "Ground-truth dataset directory")->required();
  eval->add_option("--pred", eval_pred, "Directory of predictions (<id>.png or <id>/image.png)");
  eval->add_option("--config", eval_cfg, "Gateway config JSON");
  add_model_args(eval, eval_models);
  eval->add_option("--decoder", eval_decoder, "Decoder for reconstructions when --pred is absent")->capture_default_str();
  eval->add_option("--cm-steps", cm_steps, "Consistency decoding steps")->capture_default_str();
  eval->add_option("--seed", eval_seed, "Decoder noise seed")->capture_default_str();
  eval->add_option("--method", method, "Row label (default: decoder name or 'pred')");
  eval->add_flag("--small-only", small_only, "Restrict to the small-font split");
  eval->add_option("--out", eval_out, "Metrics JSON to write")->required();

  // report ---------------------------------------------------------------------
  std::vector<std::string> rows;
  std::string title, report_out, report_dataset;
  int table = 0;
  auto* report = app.add_subcommand("report", "Render metrics rows as a table");
  report->add_option("--rows", rows, "Metrics JSON files from eval");
  report->add_option("--table", table, "Published reference table 1-3 instead of rows");
  report->add_option("--title", title, "Table title");
  report->add_option("--dataset", report_dataset, "Dataset label");
  report->add_option("--out", report_out, "Text report to write (a .json document is written alongside)");

  // serve ----------------------------------------------------------------------
  std::string serve_cfg, data_dir = "ctext-data", host = "127.0.0.1";
  int port = 8080;
  gateway::ModelPaths serve_models;
  auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
  serve->add_option("--config", serve_cfg, "Gateway config JSON");
  add_model_args(serve, serve_models);
  serve->add_option("--data-dir", data_dir, "Session storage root")->capture_default_str();
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--port", port, "Port (0 picks a free one)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      Record rec("dataset gen", argc, argv);
      rec.doc["config"] = dcfg.to_json();
      rec.doc["seed"] = gen_seed;
      const auto ds = evalkit::generate_dataset(dcfg, gen_seed);
      evalkit::write_dataset(ds, gen_out);
      rec.output("manifest", fs::path(gen_out) / "manifest.jsonl");
      rec.write(fs::path(gen_out + ".record.json"));
      std::cout << "wrote " << ds.items.size() << " items to " << gen_out << "\n";
    } else if (train_vae->parsed()) {
      Record rec("train-vae", argc, argv);
      rec.input("data", fs::path(vae_args.data) / "manifest.jsonl");
      rec.doc["train"] = train_json(vae_args);
      rec.doc["kl_weight"] = kl_weight;
      const auto corpus = evalkit::load_corpus(vae_args.data);
      diffusion::Vae vae(vae_args.seed);
      const auto r = diffusion::train_vae(vae, corpus, options_of(vae_args, "vae"), kl_weight);
      diffusion::calibrate_latent_scale(vae, corpus);
      rec.doc["latent_scale"] = vae.latent_scale();
      save_checkpoint(vae.to_checkpoint(), vae_args.out, rec, r.losses);
    } else if (train_den->parsed()) {
      Record rec("train-denoiser", argc, argv);
      rec.input("data", fs::path(den_args.data) / "manifest.jsonl");
      rec.input("vae", den_vae);
      rec.doc["train"] = train_json(den_args);
      rec.doc["T"] = den_T;
      const auto corpus = evalkit::load_corpus(den_args.data);
      const auto vae = load_vae(den_vae);
      diffusion::Denoiser model(diffusion::make_schedule(den_T), den_args.seed, den_width);
      const auto r = diffusion::train_denoiser(model, vae, corpus, options_of(den_args, "denoiser"), cond_dropout);
      save_checkpoint(model.to_checkpoint(), den_args.out, rec, r.losses);
    } else if (train_enh->parsed()) {
      Record rec("train-enhancer", argc, argv);
      rec.input("data", fs::path(enh_args.data) / "manifest.jsonl");
      rec.input("vae", enh_vae);
      rec.doc["train"] = train_json(enh_args);
      rec.doc["kappa"] = kappa;
      const auto corpus = evalkit::load_corpus(enh_args.data);
      const auto vae = load_vae(enh_vae);
      enhance::EnhancerParams<float> params(enh_args.seed, enh_hidden);
      const auto r = enhance::train_enhancer(params, vae, corpus, options_of(enh_args, "enhancer"), kappa);
      save_checkpoint(enhance::to_checkpoint(params), enh_args.out, rec, r.losses);
    } else if (pretrain->parsed()) {
      Record rec("pretrain-cm", argc, argv);
      rec.input("data", fs::path(cm_args.data) / "manifest.jsonl");
      rec.input("vae", cm_vae);
      rec.doc["train"] = train_json(cm_args);
      rec.doc["geometry"] = geo.to_json();
      const auto corpus = evalkit::load_corpus(cm_args.data);
      const auto vae = load_vae(cm_vae);
      const auto samples = consistency::make_samples(vae, corpus);
      consistency::Backbone<float> backbone(geo, cm_args.seed);
      const auto r = consistency::pretrain_backbone(backbone, samples, options_of(cm_args, "pretrain-cm"));
      save_checkpoint(consistency::to_checkpoint(backbone), cm_args.out, rec, r.losses);
    } else if (train_ad->parsed()) {
      Record rec("train-adapter", argc, argv);
      rec.input("data", fs::path(ad_args.data) / "manifest.jsonl");
      rec.input("vae", ad_vae);
      rec.input("cm_backbone", ad_backbone);
      rec.doc["train"] = train_json(ad_args);
      const auto corpus = evalkit::load_corpus(ad_args.data);
      const auto vae = load_vae(ad_vae);
      auto backbone = consistency::backbone_from_checkpoint(ckpt::load(ad_backbone, "cm_backbone"));
      auto g = backbone.geo;
      g.mask_dim = mask_dim;
      consistency::Adapter<float> adapter(g, ad_args.seed);
      const auto samples = consistency::make_samples(vae, corpus);
      const auto r = consistency::train_adapter(backbone, adapter, samples, options_of(ad_args, "train-adapter"));
      save_checkpoint(consistency::to_checkpoint(adapter), ad_args.out, rec, r.losses);
    } else if (generate->parsed()) {
      Record rec("generate", argc, argv);
      const auto config = load_config(cfg_path, gen_models);
      record_models(rec, config.models);
      gateway::ModelPaths needed = config.models;
      if (decoder != "enhance") needed.enhancer.clear();
      if (decoder != "consistency") needed.cm_backbone.clear(), needed.cm_adapter.clear();
      auto models = gateway::load_models(needed);
      nlohmann::json body{{"prompt", prompt}, {"seed", seed}, {"decoder", decoder}};
      if (!attrs_json.empty()) body["attrs"] = nlohmann::json::parse(attrs_json);
      const fs::path sdir = session_dir.empty() ? fs::path(gen_img_out + ".session") : fs::path(session_dir);
      gateway::Service svc(config, std::move(models), sdir);
      const auto s = svc.create(body);
      const auto snap = svc.generate_now(s.id, nullptr);
      ensure_parent(gen_img_out);
      io::write_file(gen_img_out, svc.image(s.id, snap.index));
      rec.doc["config"] = config.to_json();
      rec.doc["seed"] = seed;
      rec.doc["decoder"] = decoder;
      rec.doc["session"] = svc.get(s.id).to_json();
      rec.doc["checkpoints"] = snap.checkpoints;
      rec.output("image", gen_img_out);
      rec.write(record_path(gen_img_out));
      std::cout << snap.image_sha256 << "  " << gen_img_out << "\n";
    } else if (eval->parsed()) {
      Record rec("eval", argc, argv);
      rec.input("data", fs::path(eval_data) / "manifest.jsonl");
      const auto ds = evalkit::load_dataset(eval_data);
      std::vector<std::string> ids;
      Corpus truth;
      for (std::size_t i = 0; i < ds.items.size(); ++i) {
        if (small_only && !ds.items[i].small) continue;
        ids.push_back(ds.entries[i].id);
        truth.push_back(ds.items[i]);
      }
      std::vector<RgbImage> pred;
      std::string label = method;
      if (!eval_pred.empty()) {
        for (const auto& id : ids) {
          fs::path p = fs::path(eval_pred) / (id + ".png");
          if (!fs::exists(p)) p = fs::path(eval_pred) / id / "image.png";
          if (!fs::exists(p)) throw NotFoundError("no prediction for " + id + " under " + eval_pred);
          pred.push_back(io::read_png_rgb(p));
        }
        if (label.empty()) label = "pred";
      } else {
        const auto config = load_config(eval_cfg, eval_models);
        const auto kind = gateway::decoder_from_string(eval_decoder);
        gateway::ModelPaths needed;
        needed.vae = config.models.vae;
        if (kind == gateway::DecoderKind::Enhance) needed.enhancer = config.models.enhancer;
        if (kind == gateway::DecoderKind::Consistency) {
          needed.cm_backbone = config.models.cm_backbone;
          needed.cm_adapter = config.models.cm_adapter;
        }
        record_models(rec, needed);
        gateway::Models models;
        if (needed.vae.empty()) throw NotFoundError("no vae checkpoint given; run `ctext train-vae` and pass --vae");
        models.vae = std::make_shared<diffusion::Vae>(load_vae(needed.vae.string()));
        if (!needed.enhancer.empty()) {
          models.enhancer = std::make_shared<enhance::EnhancerParams<float>>(
              enhance::from_checkpoint(ckpt::load(needed.enhancer, "enhancer")));
        }
        if (!needed.cm_backbone.empty()) {
          models.cm_backbone = std::make_shared<consistency::Backbone<float>>(
              consistency::backbone_from_checkpoint(ckpt::load(needed.cm_backbone, "cm_backbone")));
        }
        if (!needed.cm_adapter.empty()) {
          models.cm_adapter = std::make_shared<consistency::Adapter<float>>(
              consistency::adapter_from_checkpoint(ckpt::load(needed.cm_adapter, "cm_adapter")));
        }
        pred = gateway::reconstruct(truth, models, kind, eval_seed, cm_steps);
        if (label.empty()) label = eval_decoder;
        rec.doc["decoder"] = eval_decoder;
        rec.doc["seed"] = eval_seed;
      }
      const auto result = gateway::evaluate(truth, pred, label);
      ensure_parent(eval_out);
      io::write_text(eval_out, result.to_json().dump(2) + "\n");
      rec.doc["small_only"] = small_only;
      rec.output("metrics", eval_out);
      rec.write(record_path(eval_out));
      std::cout << result.to_json().dump() << "\n";
    } else if (report->parsed()) {
      Record rec("report", argc, argv);
      evalkit::ReportInput in;
      if (table) {
        in = evalkit::reference_table(table);
      } else {
        if (rows.empty()) throw ContractError("report needs --rows or --table");
        for (const auto& r : rows) {
          rec.input(r, r);
          const auto e = gateway::Evaluation::from_json(nlohmann::json::parse(io::read_text(r)));
          in.rows.push_back(e.row);
          in.samples = std::max(in.samples, e.samples);
        }
      }
      if (!title.empty()) in.title = title;
      if (!report_dataset.empty()) in.dataset = report_dataset;
      const auto rep = evalkit::make_report(in);
      std::cout << rep.text;
      if (!report_out.empty()) {
        ensure_parent(report_out);
        io::write_text(report_out, rep.text);
        io::write_text(report_out + ".json", rep.document.dump(2) + "\n");
        rec.output("text", report_out);
        rec.output("document", report_out + ".json");
        rec.write(record_path(report_out));
      }
    } else if (serve->parsed()) {
      Record rec("serve", argc, argv);
      const auto config = load_config(serve_cfg, serve_models);
      record_models(rec, config.models);
      gateway::Service svc(config, gateway::load_models(config.models), data_dir);
      rec.doc["config"] = config.to_json();
      fs::create_directories(data_dir);
      rec.write(fs::path(data_dir) / "serve.record.json");
      httplib::Server server;
      gateway::register_routes(server, svc);
      const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
      if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
      std::cout << "listening on http://" << host << ":" << bound << std::endl;
      g_server = &server;
      std::signal(SIGINT, [](int) { g_server->stop(); });
      std::signal(SIGTERM, [](int) { g_server->stop(); });
      server.listen_after_bind();
    }
  } catch (const std::exception& e) {
    std::cerr << gateway::error_json(e).dump() << "\n";
    return 1;
  }
  return 0;
}
