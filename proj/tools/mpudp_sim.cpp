#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "mpudp/netsim.hpp"

using namespace mpudp;
using netsim::TraceKind;
using netsim::TraceRecord;

namespace {

struct PhaseStats {
  std::map<uint16_t, std::size_t> data_packets;
  std::map<uint16_t, double> final_srtt;
  std::map<uint16_t, rtt::ClockMs> band_entry;  // when srtt settled at +-10%
};

void print_summary(const netsim::Scenario& sc,
                   const std::vector<TraceRecord>& trace,
                   rtt::ClockMs run_until) {
  // Phase boundaries: every link-state change.
  std::set<rtt::ClockMs> cuts{0};
  for (const auto& ev : sc.events) {
    if (ev.kind == netsim::ScenarioEvent::Kind::SetDelay ||
        ev.kind == netsim::ScenarioEvent::Kind::SetLoss ||
        ev.kind == netsim::ScenarioEvent::Kind::SetUp) {
      cuts.insert(ev.at);
    }
  }
  std::vector<rtt::ClockMs> bounds(cuts.begin(), cuts.end());
  bounds.push_back(run_until + 1);

  std::printf("phases: %zu\n", bounds.size() - 1);
  for (std::size_t p = 0; p + 1 < bounds.size(); p++) {
    const auto t0 = bounds[p];
    const auto t1 = bounds[p + 1];
    PhaseStats st;
    std::map<uint16_t, std::vector<std::pair<rtt::ClockMs, double>>> srtt_series;
    for (const auto& r : trace) {
      if (r.at < t0 || r.at >= t1) continue;
      if (r.kind == TraceKind::PacketSent && r.host == netsim::Host::Client &&
          !r.is_probe && r.value > wire::HEADER_SIZE) {
        st.data_packets[r.flow_id]++;
      } else if (r.kind == TraceKind::SrttUpdate) {
        srtt_series[r.flow_id].emplace_back(r.at, r.value);
      }
    }
    for (const auto& [flow, series] : srtt_series) {
      const double final_value = series.back().second;
      st.final_srtt[flow] = final_value;
      rtt::ClockMs entered = t0;
      for (auto it = series.rbegin(); it != series.rend(); ++it) {
        if (std::abs(it->second - final_value) > 0.1 * final_value) break;
        entered = it->first;
      }
      st.band_entry[flow] = entered;
    }

    std::printf("phase %zu [%llu ms, %llu ms):\n", p + 1,
                static_cast<unsigned long long>(t0),
                static_cast<unsigned long long>(t1 == run_until + 1 ? run_until : t1));
    uint16_t chosen = 0;
    std::size_t chosen_count = 0;
    for (const auto& [flow, count] : st.data_packets) {
      if (count > chosen_count) {
        chosen = flow;
        chosen_count = count;
      }
    }
    if (chosen_count > 0) {
      std::printf("  data flow: %u (%zu packets)\n", chosen, chosen_count);
    } else {
      std::printf("  data flow: none\n");
    }
    for (const auto& [flow, srtt] : st.final_srtt) {
      std::printf("  flow %u: srtt %.1f ms, within 10%% after %llu ms\n", flow,
                  srtt,
                  static_cast<unsigned long long>(st.band_entry[flow] - t0));
    }
  }

  std::printf("probe overhead (whole run):\n");
  std::printf("  %-6s %-8s %-14s %-12s %-12s\n", "flow", "probes",
              "interval(ms)", "IPv6(B/s)", "IPv4(B/s)");
  double total6 = 0.0;
  double total4 = 0.0;
  for (const auto& row :
       netsim::overhead_report(trace, netsim::FRAME_OVERHEAD_IPV6)) {
    if (row.probe_count < 2) continue;
    const double bps4 = netsim::probe_overhead_bps(
        netsim::FRAME_OVERHEAD_IPV4 + wire::HEADER_SIZE, row.mean_interval_ms);
    std::printf("  %-6u %-8zu %-14.1f %-12.1f %-12.1f\n", row.flow_id,
                row.probe_count, row.mean_interval_ms, row.bytes_per_sec, bps4);
    total6 += row.bytes_per_sec;
    total4 += bps4;
  }
  std::printf("  total: %.1f B/s (IPv6 framing), %.1f B/s (IPv4 framing)\n",
              total6, total4);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic multipath scenario runner"};
  std::string scenario_path;
  uint64_t seed = 0;
  std::string csv_path;
  bool summary = false;
  app.add_option("scenario", scenario_path, "scenario file")->required();
  auto* seed_opt =
      app.add_option("--seed", seed, "override the scenario's PRNG seed");
  app.add_option("--csv", csv_path, "write the trace CSV to this file");
  app.add_flag("--summary", summary, "print per-phase flow and overhead stats");
  CLI11_PARSE(app, argc, argv);

  try {
    netsim::Scenario sc = netsim::parse_scenario_file(scenario_path);
    if (seed_opt->count() > 0) {
      sc.seed = seed;
    }
    const rtt::ClockMs run_until =
        sc.run_until_ms != 0
            ? sc.run_until_ms
            : (sc.events.empty() ? 2000 : sc.events.back().at + 2000);

    const auto trace = netsim::run(sc, sc.seed);

    if (csv_path.empty()) {
      netsim::write_csv(std::cout, trace);
    } else {
      std::ofstream out(csv_path, std::ios::binary);
      if (!out) {
        std::cerr << "cannot open " << csv_path << " for writing\n";
        return 2;
      }
      netsim::write_csv(out, trace);
      if (!out.good()) {
        std::cerr << "short write to " << csv_path << "\n";
        return 2;
      }
    }
    if (summary) {
      print_summary(sc, trace, run_until);
    }
  } catch (const netsim::ScenarioError& e) {
    std::cerr << "scenario error: " << e.what() << "\n";
    return 1;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
