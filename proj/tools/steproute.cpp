// steproute: route, simulate, sweep, analyze, and serve.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>

#include "steproute/http_backend.hpp"
#include "steproute/service.hpp"
#include "steproute/steproute.hpp"

namespace fs = std::filesystem;
using namespace steproute;

namespace {

struct PolicyFlags {
  std::optional<std::string> policy;
  std::optional<double> tau;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> budget;
  std::optional<std::string> delimiter;

  void add(CLI::App& app) {
    app.add_option("--policy", policy, "init_entropy | step_entropy | step_perplexity | random_score | always_small | always_large");
    app.add_option("--tau,--threshold", tau, "routing threshold");
    app.add_option("--seed", seed, "seed for the random_score policy");
    app.add_option("--budget", budget, "think-phase token budget");
    app.add_option("--delimiter", delimiter, "step delimiter (escape sequences \\n are expanded)");
  }

  void apply(PolicyConfig& c) const {
    if (policy) {
      const auto p = parse_policy(*policy);
      if (!p) throw ConfigError("policy", "unknown policy '" + *policy + "'");
      c.policy = *p;
    }
    if (tau) c.threshold = *tau;
    if (seed) c.rng_seed = *seed;
    if (budget) c.budget_tokens = *budget;
    if (delimiter) {
      std::string d;
      for (std::size_t i = 0; i < delimiter->size(); ++i) {
        if ((*delimiter)[i] == '\\' && i + 1 < delimiter->size() && (*delimiter)[i + 1] == 'n') {
          d += '\n';
          ++i;
        } else {
          d += (*delimiter)[i];
        }
      }
      c.segmenter.delimiter = d;
    }
    c.validate();
  }
};

struct SpecFlags {
  std::optional<std::int64_t> draft_length;
  std::optional<double> acceptance;

  void add(CLI::App& app) {
    app.add_option("--spec-n", draft_length, "enable speculative decoding with this draft length");
    app.add_option("--spec-alpha", acceptance, "per-token draft acceptance rate (default 0.7)");
  }

  BackendProfile profile_for(const Scenario& sc) const {
    BackendProfile p = sc.profile.value_or(BackendProfile{});
    if (draft_length || acceptance) {
      SpecDecoding s = p.spec.value_or(SpecDecoding{});
      if (draft_length) s.draft_length = *draft_length;
      if (acceptance) s.acceptance_rate = *acceptance;
      p.spec = s;
    }
    p.validate();
    return p;
  }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string one_line(std::string s, std::size_t width) {
  for (auto& c : s) {
    if (c == '\n') c = ' ';
  }
  if (s.size() > width) s = s.substr(0, width - 3) + "...";
  return s;
}

void print_summary(const Trace& t, std::ostream& out) {
  out << std::left << std::setw(5) << "step" << std::setw(9) << "h_init" << std::setw(11) << "action"
      << std::setw(7) << "model" << std::right << std::setw(7) << "tokens" << std::setw(10) << "ms" << "  text\n";
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    const auto& d = t.decisions[i];
    std::ostringstream h;
    if (d.h_init_nats) h << std::fixed << std::setprecision(4) << *d.h_init_nats;
    else h << "-";
    out << std::left << std::setw(5) << i + 1 << std::setw(9) << h.str() << std::setw(11) << to_string(d.action)
        << std::setw(7) << to_string(s.generator) << std::right << std::setw(7) << s.token_count << std::setw(10)
        << std::fixed << std::setprecision(1) << s.latency_ms << "  " << one_line(s.text, 60) << '\n';
  }
  const auto& a = t.accounting;
  out << "answer (" << to_string(t.answer_generator) << "): " << one_line(t.final_answer, 100) << '\n';
  out << std::setprecision(2) << "intervention_rate " << a.intervention_rate * 100.0 << "%  small_tokens "
      << a.small_tokens << "  large_tokens " << a.large_tokens << "  probes " << a.probe_count << "  sunk "
      << a.sunk_tokens << '\n';
  out << std::setprecision(1) << "latency_ms think " << a.think_ms << "  answer " << a.answer_ms << "  total "
      << a.total_ms() << " (" << a.latency_source << ")\n";
}

void write_record(const std::string& path, const Trace& t, const std::string& status = "ok",
                  const std::string& error = {}) {
  if (path.empty()) return;
  TraceSink sink(path);
  static std::uint64_t n = 0;
  TraceRecord r{"cli-" + std::to_string(static_cast<long long>(std::time(nullptr))) + "-" + std::to_string(n++),
                utc_timestamp(), status, error, t};
  sink.append(r);
}

// Routes a scenario through its scripted backends and replaces wall-clock
// timings with simulated ones.
Trace simulate_scenario(const std::shared_ptr<const Scenario>& sc, const PolicyConfig& cfg,
                        const BackendProfile& profile) {
  ScriptOptions opts;
  opts.prompt_template = cfg.prompt_template;
  opts.segmenter = cfg.segmenter;
  OwnedBackends b = scripted_pair(sc, opts);
  Trace t = run_trace(sc->question, b.pair(), cfg);
  simulate_trace(t, profile);
  return t;
}

std::vector<Scenario> load_scenarios(const std::vector<std::string>& files, const std::string& dir,
                                     const SegmenterConfig& seg) {
  std::vector<Scenario> out;
  for (const auto& f : files) out.push_back(load_scenario(f, seg));
  if (!dir.empty()) {
    auto more = load_scenario_dir(dir, seg);
    out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }
  return out;
}

std::vector<double> parse_thresholds(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("thresholds", "'" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("thresholds", "must not be empty");
  return out;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-wise small/large model routing on initial-token entropy"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "route one question and print the trace summary");
  std::string run_config, run_question, run_question_file, run_scenario, run_trace_out;
  PolicyFlags run_flags;
  run->add_option("--config", run_config, "service config (JSON) naming both backends");
  run->add_option("--question", run_question, "question text");
  run->add_option("--question-file", run_question_file, "file holding the question");
  run->add_option("--scenario", run_scenario, "use scripted backends from this scenario file");
  run->add_option("--trace-out", run_trace_out, "append the trace record to this JSONL file");
  run_flags.add(*run);

  // simulate
  auto* sim = app.add_subcommand("simulate", "run scenario files through scripted backends with simulated latency");
  std::vector<std::string> sim_files;
  std::string sim_dir, sim_trace_out;
  PolicyFlags sim_flags;
  SpecFlags sim_spec;
  sim->add_option("--scenario", sim_files, "scenario file (repeatable)");
  sim->add_option("--scenario-dir", sim_dir, "directory of scenario files");
  sim->add_option("--trace-out", sim_trace_out, "append trace records to this JSONL file");
  sim_flags.add(*sim);
  sim_spec.add(*sim);

  // sweep
  auto* sw = app.add_subcommand("sweep", "run every question at every threshold and print the table");
  std::vector<std::string> sw_files;
  std::string sw_dir, sw_config, sw_questions, sw_csv, sw_thresholds = "0.01,0.1,0.6,0.9,1.8";
  PolicyFlags sw_flags;
  SpecFlags sw_spec;
  sw->add_option("--thresholds", sw_thresholds, "comma-separated thresholds");
  sw->add_option("--scenario", sw_files, "scenario file (repeatable)");
  sw->add_option("--scenario-dir", sw_dir, "directory of scenario files");
  sw->add_option("--config", sw_config, "service config for live backends");
  sw->add_option("--questions", sw_questions, "live mode: file with one question per line");
  sw->add_option("--csv", sw_csv, "also write the table as CSV");
  sw_flags.add(*sw);
  sw_spec.add(*sw);

  // analyze
  auto* an = app.add_subcommand("analyze", "metric histograms and bimodality over trace files");
  std::vector<std::string> an_traces;
  std::string an_metric = "h_init", an_out;
  std::size_t an_bins = 40;
  an->add_option("--traces", an_traces, "JSONL trace file (repeatable)")->required();
  an->add_option("--metric", an_metric, "h_init | h_step | ppl_step");
  an->add_option("--bins", an_bins, "histogram bin count");
  an->add_option("--out", an_out, "histogram data file (default: <metric>.hist.dat)");

  // generate
  auto* gen = app.add_subcommand("generate", "write synthetic bimodal scenario files");
  std::string gen_dir;
  std::size_t gen_count = 20, gen_steps = 12;
  std::uint64_t gen_seed = 1;
  BimodalParams gen_params;
  gen->add_option("--out-dir", gen_dir, "output directory")->required();
  gen->add_option("--count", gen_count, "number of scenarios");
  gen->add_option("--steps", gen_steps, "steps per scenario");
  gen->add_option("--seed", gen_seed, "first seed; scenario i uses seed + i");
  gen->add_option("--high-weight", gen_params.high_weight, "share of high-entropy steps");
  gen->add_option("--high-error", gen_params.high_error_prob, "small-model error rate on high-entropy steps");

  // serve
  auto* srv = app.add_subcommand("serve", "OpenAI-compatible routing proxy");
  std::string srv_config, srv_listen;
  PolicyFlags srv_flags;
  srv->add_option("--config", srv_config, "service config (JSON)")->required();
  srv->add_option("--listen", srv_listen, "host:port, overrides the config");
  srv_flags.add(*srv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run) {
      if (run_scenario.empty() == run_config.empty()) {
        std::cerr << "run: give exactly one of --config or --scenario\n";
        return 2;
      }
      PolicyConfig cfg;
      std::optional<ServiceConfig> service;
      if (!run_config.empty()) {
        service = load_service_config(run_config);
        cfg = service->policy;
      }
      run_flags.apply(cfg);
      Trace t;
      if (!run_scenario.empty()) {
        auto sc = std::make_shared<const Scenario>(load_scenario(run_scenario, cfg.segmenter));
        t = simulate_scenario(sc, cfg, sc->profile.value_or(BackendProfile{}));
      } else {
        std::string q = !run_question_file.empty() ? read_file(run_question_file) : run_question;
        if (q.empty()) {
          std::cerr << "run: --question or --question-file is required with --config\n";
          return 2;
        }
        service->policy = cfg;
        OwnedBackends b = http_pair(*service);
        try {
          t = run_trace(q, b.pair(), cfg);
        } catch (const TraceAborted& e) {
          write_record(run_trace_out, e.partial(), "failed", e.what());
          throw;
        }
      }
      print_summary(t, std::cout);
      write_record(run_trace_out, t);
      return 0;
    }

    if (*sim) {
      PolicyConfig cfg;
      sim_flags.apply(cfg);
      const auto scenarios = load_scenarios(sim_files, sim_dir, cfg.segmenter);
      if (scenarios.empty()) {
        std::cerr << "simulate: give --scenario or --scenario-dir\n";
        return 2;
      }
      for (const auto& s : scenarios) {
        auto sc = std::make_shared<const Scenario>(s);
        Trace t = simulate_scenario(sc, cfg, sim_spec.profile_for(*sc));
        std::cout << "== " << one_line(sc->question, 90) << '\n';
        print_summary(t, std::cout);
        const bool correct = boxed_answer(t.final_answer) == sc->answer_oracle;
        std::cout << "oracle " << (correct ? "pass" : "fail") << "\n\n";
        write_record(sim_trace_out, t);
      }
      return 0;
    }

    if (*sw) {
      PolicyConfig cfg;
      std::optional<ServiceConfig> service;
      if (!sw_config.empty()) {
        service = load_service_config(sw_config);
        cfg = service->policy;
      }
      sw_flags.apply(cfg);
      const auto thresholds = parse_thresholds(sw_thresholds);
      SweepReport report;
      if (service) {
        if (sw_questions.empty()) {
          std::cerr << "sweep: --questions is required with --config\n";
          return 2;
        }
        std::vector<std::string> questions;
        std::ifstream in(sw_questions);
        if (!in) throw Error("cannot open " + sw_questions);
        for (std::string line; std::getline(in, line);) {
          if (!line.empty()) questions.push_back(line);
        }
        report = sweep(questions, [&](std::size_t) { return http_pair(*service); }, thresholds, cfg);
      } else {
        std::vector<std::shared_ptr<const Scenario>> scenarios;
        for (auto& s : load_scenarios(sw_files, sw_dir, cfg.segmenter))
          scenarios.push_back(std::make_shared<const Scenario>(std::move(s)));
        if (scenarios.empty()) {
          std::cerr << "sweep: give --scenario, --scenario-dir, or --config with --questions\n";
          return 2;
        }
        std::vector<std::string> questions;
        for (const auto& s : scenarios) questions.push_back(s->question);
        ScriptOptions opts;
        opts.prompt_template = cfg.prompt_template;
        opts.segmenter = cfg.segmenter;
        report = sweep(
            questions, [&](std::size_t q) { return scripted_pair(scenarios[q], opts); }, thresholds, cfg,
            [&](const Trace& t, std::size_t q) {
              Trace copy = t;
              return static_cast<double>(simulate_trace(copy, sw_spec.profile_for(*scenarios[q])));
            },
            [&](std::size_t q, const std::string& answer) { return boxed_answer(answer) == scenarios[q]->answer_oracle; });
      }
      const SweepTable table = sweep_table(report);
      std::cout << "policy " << report.policy << '\n' << table.text();
      if (!sw_csv.empty()) {
        std::ofstream out(sw_csv);
        if (!out) throw Error("cannot write " + sw_csv);
        out << table.csv();
      }
      return 0;
    }

    if (*an) {
      const auto metric = parse_metric(an_metric);
      if (!metric) {
        std::cerr << "analyze: unknown metric '" << an_metric << "'\n";
        return 2;
      }
      std::vector<Trace> traces;
      for (const auto& f : an_traces)
        for (auto& r : read_trace_records(f)) traces.push_back(std::move(r.trace));
      const auto values = sample_values(collect_metric(traces, *metric));
      const Histogram h = histogram(values, an_bins);
      const std::string out_path = an_out.empty() ? an_metric + ".hist.dat" : an_out;
      std::ofstream out(out_path);
      if (!out) throw Error("cannot write " + out_path);
      out << histogram_data(h, an_metric);
      std::cout << an_metric << ": " << values.size() << " samples from " << traces.size() << " traces, range ["
                << h.min << ", " << h.max << "]\n";
      if (values.size() >= 4) {
        try {
          const double bc = bimodality_coefficient(values);
          std::cout << "bimodality_coefficient " << bc << (bc > 5.0 / 9.0 ? " (bimodal)" : " (unimodal)") << '\n';
        } catch (const AnalysisError& e) {
          std::cout << "bimodality_coefficient n/a: " << e.what() << '\n';
        }
      }
      std::cout << "histogram written to " << out_path << '\n';
      return 0;
    }

    if (*gen) {
      fs::create_directories(gen_dir);
      for (std::size_t i = 0; i < gen_count; ++i) {
        const Scenario sc = build_distribution_scenario(gen_seed + i, gen_steps, gen_params);
        std::ostringstream name;
        name << "synthetic_" << std::setw(4) << std::setfill('0') << i << ".json";
        save_scenario(sc, fs::path(gen_dir) / name.str());
      }
      std::cout << "wrote " << gen_count << " scenarios to " << gen_dir << '\n';
      return 0;
    }

    if (*srv) {
      ServiceConfig c = load_service_config(srv_config);
      srv_flags.apply(c.policy);
      if (!srv_listen.empty()) c.listen = parse_listen(srv_listen, "--listen");
      auto logger = std::make_shared<Logger>(parse_log_level(c.log_level));
      auto sink = std::make_shared<TraceSink>(c.trace_sink);
      ServiceOptions opts{c.policy, c.include_think, "steproute"};
      RouterService service(opts, [c](const PolicyConfig& p) {
        ServiceConfig per = c;
        per.policy = p;
        return http_pair(per);
      }, sink, logger);
      const auto health = service.health();
      if (health["status"] != "ok") logger->log(LogLevel::Warn, "backend health at startup: " + health.dump());

      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      if (!server.bind_to_port(c.listen.host, c.listen.port))
        throw Error("cannot bind " + c.listen.host + ":" + std::to_string(c.listen.port));
      logger->log(LogLevel::Info, "listening on " + c.listen.host + ":" + std::to_string(c.listen.port));
      server.listen_after_bind();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
