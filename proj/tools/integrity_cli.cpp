// Command-line front end: verify, eval, kl, synth-gen, csv-import.
// Exit codes: 0 = success / INTACT, 10 = VIOLATION, 1 = error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "integrity/cli.hpp"

namespace fs = std::filesystem;
using namespace integrity;

int main(int argc, char** argv) {
  CLI::App app{"Integrity verification for black-box generative models"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", seed, "Master seed (overrides the config)"); };

  cli::VerifyOptions verify;
  std::string method = "prompt_automaton";
  std::string library;
  auto* v = app.add_subcommand("verify", "Verify a suspect model against the reference");
  v->add_option("--config", verify.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  v->add_option("--library", library, "Prompt library (.txt, one prompt per line, or .json)");
  v->add_option("--out", verify.output, "Report path (JSON)")->required();
  v->add_option("--method", method, "prompt_automaton or random_baseline")
      ->check(CLI::IsMember({"prompt_automaton", "random_baseline"}));
  add_seed(v);

  cli::EvalOptions eval;
  auto* e = app.add_subcommand("eval", "Repeated trials or magnitude sweep on synthetic specs");
  e->add_option("--config", eval.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", eval.manifest, "Sweep or violation manifest (JSON)")->required()->check(CLI::ExistingFile);
  e->add_option("--out-dir", eval.out_dir, "Directory for metrics.csv and trials.jsonl")->required();
  add_seed(e);

  cli::KlOptions kl;
  std::string p_prime;
  auto* k = app.add_subcommand("kl", "Gaussian KL between feature files: D(P||Q), plus the relative score with P'");
  k->add_option("p", kl.p, "Feature file P")->required();
  k->add_option("q", kl.q, "Feature file Q")->required();
  k->add_option("p_prime", p_prime, "Second reference sample P'");
  k->add_option("--mode", kl.mode, "full_ridge, diagonal or shrinkage");
  k->add_option("--ridge", kl.ridge, "Relative ridge for full_ridge");
  k->add_option("--denom-floor", kl.denom_floor, "Floor on the reference divergence");
  add_seed(k);

  SyntheticParams params;
  std::string spec_out, library_out;
  std::size_t arms = 0;
  auto* s = app.add_subcommand("synth-gen", "Write a synthetic environment spec");
  s->add_option("--out", spec_out, "Spec path (JSON)")->required();
  s->add_option("--dim", params.dim, "Feature dimension");
  s->add_option("--shifts", params.shifts, "Per-prompt suspect mean shift in reference standard deviations");
  s->add_option("--arms", arms, "Prompt count; pads --shifts with zeros or truncates it");
  s->add_option("--variances", params.variances, "Per-coordinate variances (one value broadcasts)");
  s->add_option("--correlation", params.correlation, "Equicorrelation of the reference covariance");
  s->add_option("--noise", params.suspect_noise_sigma, "Additive Gaussian noise on suspect features");
  s->add_option("--library-out", library_out, "Also write the prompt library (text)");
  add_seed(s);

  std::string csv_in, plaf_out;
  auto* c = app.add_subcommand("csv-import", "Convert a CSV feature file to PLAF");
  c->add_option("csv", csv_in, "Input CSV (first line dim=<d>)")->required();
  c->add_option("out", plaf_out, "Output PLAF file")->required();
  add_seed(c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    // help/version exit 0; usage errors keep the 0/10/1 contract
    return app.exit(err) == 0 ? cli::kExitOk : cli::kExitError;
  }

  if (v->parsed()) {
    verify.seed = seed;
    if (!library.empty()) verify.library = library;
    verify.method = method == "random_baseline" ? Method::RandomBaseline : Method::PromptAutomaton;
    return cli::cmd_verify(verify);
  }
  if (e->parsed()) {
    eval.seed = seed;
    return cli::cmd_eval(eval);
  }
  if (k->parsed()) {
    kl.seed = seed;
    if (!p_prime.empty()) kl.p_prime = p_prime;
    return cli::cmd_kl(kl);
  }
  if (s->parsed()) {
    if (seed) params.seed = *seed;
    if (arms > 0) params.shifts.resize(arms, 0.0);
    return cli::cmd_synth_gen(params, spec_out, library_out.empty() ? std::nullopt : std::optional<fs::path>(library_out));
  }
  if (c->parsed()) return cli::cmd_csv_import(csv_in, plaf_out);
  return cli::kExitError;
}
