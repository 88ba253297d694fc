#include "ecgrobust/eval.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ecgrobust/checkpoint.hpp"
#include "ecgrobust/errors.hpp"
#include "ecgrobust/rng.hpp"

namespace ecgrobust {

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty()) throw DataError("accuracy: empty input");
  if (preds.size() != labels.size()) throw ParameterError("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, int n_classes) {
  if (preds.empty()) throw DataError("macro_f1: empty input");
  if (preds.size() != labels.size()) throw ParameterError("macro_f1: length mismatch");
  if (n_classes < 1) throw ParameterError("macro_f1: n_classes must be positive");
  std::vector<std::int64_t> tp(static_cast<std::size_t>(n_classes), 0);
  std::vector<std::int64_t> fp(static_cast<std::size_t>(n_classes), 0);
  std::vector<std::int64_t> fn(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], y = labels[i];
    if (p < 0 || p >= n_classes || y < 0 || y >= n_classes) {
      throw ParameterError("macro_f1: class index out of range");
    }
    if (p == y) {
      ++tp[static_cast<std::size_t>(p)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(y)];
    }
  }
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    const auto i = static_cast<std::size_t>(c);
    const std::int64_t support = tp[i] + fp[i] + fn[i];
    if (support == 0) continue;  // class absent from both labels and predictions
    ++present;
    total += (2.0 * static_cast<double>(tp[i])) /
             static_cast<double>(2 * tp[i] + fp[i] + fn[i]);
  }
  if (present == 0) throw DataError("macro_f1: no classes present");
  return total / static_cast<double>(present);
}

std::string noise_kind_name(NoiseKind k) { return k == NoiseKind::kPgd ? "pgd" : "white"; }

NoiseKind noise_kind_from_name(const std::string& name) {
  if (name == "pgd") return NoiseKind::kPgd;
  if (name == "white") return NoiseKind::kWhite;
  throw ParameterError("unknown noise kind '" + name + "'");
}

namespace {

std::vector<MaskedBatch> eval_batches(const std::vector<PreparedRecord>& records,
                                      std::int64_t target_len, std::uint64_t seed,
                                      int batch_size) {
  if (records.empty()) throw DataError("evaluation: empty record set");
  if (batch_size < 1) throw ParameterError("evaluation: batch_size must be >= 1");
  std::vector<MaskedBatch> out;
  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const PreparedRecord*> ptrs;
    std::vector<std::int64_t> offsets;
    for (std::size_t i = start; i < stop; ++i) {
      ptrs.push_back(&records[i]);
      offsets.push_back(fixed_offset(records[i], target_len, seed));
    }
    out.push_back(make_batch(ptrs, target_len, offsets));
  }
  return out;
}

}  // namespace

std::vector<int> predict(const EcgNet& net, const std::vector<PreparedRecord>& records,
                         std::uint64_t seed, int batch_size) {
  std::vector<int> preds;
  for (const MaskedBatch& batch :
       eval_batches(records, net.config().input_length, seed, batch_size)) {
    const Tensor logits = net.forward_values(batch.signals, batch.mask);
    for (int p : argmax_rows(logits)) preds.push_back(p);
  }
  return preds;
}

SweepReport noise_sweep(const EcgNet& net, const std::vector<PreparedRecord>& testset,
                        NoiseKind kind, std::span<const double> levels,
                        const AttackConfig& attack_template, const std::string& method_label,
                        std::uint64_t seed, int batch_size, int repeats) {
  if (levels.empty() || levels.front() != 0.0) {
    throw ParameterError("noise_sweep: levels must start with the clean level 0");
  }
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) {
      throw ParameterError("noise_sweep: levels must be strictly increasing");
    }
  }
  if (repeats < 1) throw ParameterError("noise_sweep: repeats must be >= 1");

  const auto batches = eval_batches(testset, net.config().input_length, seed, batch_size);
  const int n_classes = static_cast<int>(net.config().num_classes);

  SweepReport report;
  report.method_label = method_label;
  report.kind = kind;
  report.seed = seed;
  report.attack_template = attack_template;
  report.model_checksum = model_checksum(net);

  for (double level : levels) {
    const int draws = (kind == NoiseKind::kWhite && level != 0.0) ? repeats : 1;
    double acc_sum = 0.0, f1_sum = 0.0;
    for (int r = 0; r < draws; ++r) {
      const std::uint64_t cell_seed =
          derive_seed(seed, noise_kind_name(kind) + ":" + method_label,
                      std::bit_cast<std::uint64_t>(level), static_cast<std::uint64_t>(r));
      std::vector<int> preds;
      std::vector<int> labels;
      for (const MaskedBatch& batch : batches) {
        Tensor inputs;
        if (level == 0.0) {
          inputs = batch.signals;
        } else if (kind == NoiseKind::kPgd) {
          AttackConfig acfg = attack_template;
          acfg.epsilon = level;
          acfg.seed = cell_seed;
          inputs = pgd_attack(net, batch, acfg);
        } else {
          inputs = uniform_noise(batch, level, attack_template.perturb_padding, cell_seed);
        }
        const Tensor logits = net.forward_values(inputs, batch.mask);
        for (int p : argmax_rows(logits)) preds.push_back(p);
        labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
      }
      acc_sum += accuracy(preds, labels);
      f1_sum += macro_f1(preds, labels, n_classes);
    }
    report.rows.push_back({level, acc_sum / static_cast<double>(draws),
                           f1_sum / static_cast<double>(draws)});
  }
  return report;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double_strict(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw DataError("cannot parse number '" + s + "'");
  }
  return v;
}

namespace {

std::string report_stem(const SweepReport& report) {
  return report.method_label + "_" + noise_kind_name(report.kind);
}

void write_sweep_svg(const SweepReport& report, const std::filesystem::path& path) {
  const double width = 640, height = 400;
  const double x0 = 60, y0 = 40, plot_w = width - 100, plot_h = height - 100;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << report.method_label << " under " << noise_kind_name(report.kind) << " noise</text>\n";

  const std::size_t n = report.rows.size();
  auto px = [&](std::size_t i) {
    return x0 + (n > 1 ? plot_w * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0);
  };
  auto py = [&](double v) { return y0 + plot_h * (1.0 - v); };

  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 + plot_h << "\" x2=\"" << x0 + plot_w
      << "\" y2=\"" << y0 + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\""
      << y0 + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = static_cast<double>(tick) / 5.0;
    svg << "<text x=\"" << x0 - 8 << "\" y=\"" << py(v) + 4
        << "\" text-anchor=\"end\" font-size=\"10\">" << format_double(v) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    svg << "<text x=\"" << px(i) << "\" y=\"" << y0 + plot_h + 16
        << "\" text-anchor=\"middle\" font-size=\"9\">" << format_double(report.rows[i].noise_level)
        << "</text>\n";
  }

  auto polyline = [&](const char* color, auto getter) {
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      if (i) svg << ' ';
      svg << px(i) << ',' << py(getter(report.rows[i]));
    }
    svg << "\"/>\n";
  };
  polyline("#1f77b4", [](const SweepRow& r) { return r.accuracy; });
  polyline("#d62728", [](const SweepRow& r) { return r.macro_f1; });

  svg << "<text x=\"" << x0 + plot_w - 4 << "\" y=\"" << y0 + 12
      << "\" text-anchor=\"end\" font-size=\"11\" fill=\"#1f77b4\">accuracy</text>\n";
  svg << "<text x=\"" << x0 + plot_w - 4 << "\" y=\"" << y0 + 26
      << "\" text-anchor=\"end\" font-size=\"11\" fill=\"#d62728\">macro F1</text>\n";
  svg << "<text x=\"" << x0 + plot_w / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"11\">noise level</text>\n";
  svg << "</svg>\n";

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("emit_report: cannot write " + path.string());
  os << svg.str();
}

}  // namespace

void emit_report(const SweepReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("emit_report: cannot create " + out_dir.string());

  const std::string stem = report_stem(report);
  {
    std::ofstream os(out_dir / (stem + ".csv"), std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("emit_report: cannot write " + (out_dir / (stem + ".csv")).string());
    os << "noise_level,accuracy,macro_f1\n";
    for (const SweepRow& row : report.rows) {
      os << format_double(row.noise_level) << ',' << format_double(row.accuracy) << ','
         << format_double(row.macro_f1) << '\n';
    }
  }
  {
    nlohmann::json meta;
    meta["method"] = report.method_label;
    meta["kind"] = noise_kind_name(report.kind);
    meta["seed"] = report.seed;
    meta["model_checksum"] = report.model_checksum;
    meta["attack"] = {{"steps", report.attack_template.steps},
                      {"alpha", report.attack_template.alpha},
                      {"random_start", report.attack_template.random_start},
                      {"perturb_padding", report.attack_template.perturb_padding}};
    std::ofstream os(out_dir / (stem + ".meta.json"), std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("emit_report: cannot write metadata for " + stem);
    os << meta.dump(2) << '\n';
  }
  write_sweep_svg(report, out_dir / (stem + ".svg"));
}

std::vector<SweepRow> parse_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("parse_report_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "noise_level,accuracy,macro_f1") {
    throw DataError("parse_report_csv: bad header in " + path.string());
  }
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<std::string, 3> cells;
    std::size_t cell = 0, start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        if (cell >= 3) throw DataError("parse_report_csv: too many columns");
        cells[cell++] = line.substr(start, i - start);
        start = i + 1;
      }
    }
    if (cell != 3) throw DataError("parse_report_csv: expected 3 columns");
    rows.push_back({parse_double_strict(cells[0]), parse_double_strict(cells[1]),
                    parse_double_strict(cells[2])});
  }
  return rows;
}

void dump_signal_svg(const Tensor& clean, const Tensor& noisy, std::int64_t lead,
                     const std::filesystem::path& path) {
  if (clean.rank() != 2 || !clean.same_shape(noisy)) {
    throw ParameterError("dump_signal_svg: need two [c,l] tensors of equal shape");
  }
  if (lead < 0 || lead >= clean.dim(0)) throw ParameterError("dump_signal_svg: lead out of range");
  const std::int64_t len = clean.dim(1);
  const std::int64_t stride = std::max<std::int64_t>(1, len / 2048);

  const double width = 960, height = 320;
  const double x0 = 10, plot_w = width - 20, mid = height / 2, scale = height / 2.6;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

  auto polyline = [&](const Tensor& t, const char* color, const char* opacity) {
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-opacity=\"" << opacity
        << "\" stroke-width=\"0.8\" points=\"";
    bool first = true;
    const double* row = t.ptr() + lead * len;
    for (std::int64_t i = 0; i < len; i += stride) {
      if (!first) svg << ' ';
      first = false;
      const double x = x0 + plot_w * static_cast<double>(i) / static_cast<double>(len - 1);
      svg << x << ',' << mid - scale * row[i];
    }
    svg << "\"/>\n";
  };
  polyline(noisy, "#d62728", "0.8");
  polyline(clean, "#1f77b4", "0.9");
  svg << "<text x=\"12\" y=\"16\" font-size=\"11\" fill=\"#1f77b4\">clean</text>\n";
  svg << "<text x=\"12\" y=\"30\" font-size=\"11\" fill=\"#d62728\">noisy</text>\n";
  svg << "</svg>\n";

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("dump_signal_svg: cannot write " + path.string());
  os << svg.str();
}

}  // namespace ecgrobust
