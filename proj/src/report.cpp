#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "masf/harness.hpp"

namespace masf {

using nlohmann::json;

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

std::string fmt_double(double v, const char* spec = "%.17g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!allowed.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

Hyperparams parse_hyperparams(const json& j) {
    check_keys(j,
               {"alpha", "eta", "gamma", "beta1", "beta2", "tau", "margin", "clip_threshold", "clip_outer",
                "clip_phi", "decay_rate", "decay_every", "batch_size", "n_meta_train", "n_meta_test", "local_loss",
                "outer_optimizer", "outer_task_on_all"},
               "hyperparams");
    Hyperparams hp;
    read_opt(j, "alpha", hp.alpha);
    read_opt(j, "eta", hp.eta);
    read_opt(j, "gamma", hp.gamma);
    read_opt(j, "beta1", hp.beta1);
    read_opt(j, "beta2", hp.beta2);
    read_opt(j, "tau", hp.tau);
    read_opt(j, "margin", hp.margin);
    read_opt(j, "clip_threshold", hp.clip_threshold);
    read_opt(j, "clip_outer", hp.clip_outer);
    read_opt(j, "clip_phi", hp.clip_phi);
    read_opt(j, "decay_rate", hp.decay_rate);
    read_opt(j, "decay_every", hp.decay_every);
    read_opt(j, "batch_size", hp.batch_size);
    read_opt(j, "n_meta_train", hp.n_meta_train);
    read_opt(j, "n_meta_test", hp.n_meta_test);
    read_opt(j, "outer_task_on_all", hp.outer_task_on_all);
    if (j.contains("local_loss")) hp.local_loss = parse_local_loss(j.at("local_loss").get<std::string>());
    if (j.contains("outer_optimizer") && j.at("outer_optimizer").get<std::string>() != "sgd") {
        throw ConfigError("only the 'sgd' outer optimizer is available");
    }
    return hp;
}

json hyperparams_json(const Hyperparams& hp) {
    return json{{"alpha", hp.alpha},
                {"eta", hp.eta},
                {"gamma", hp.gamma},
                {"beta1", hp.beta1},
                {"beta2", hp.beta2},
                {"tau", hp.tau},
                {"margin", hp.margin},
                {"clip_threshold", hp.clip_threshold},
                {"clip_outer", hp.clip_outer},
                {"clip_phi", hp.clip_phi},
                {"decay_rate", hp.decay_rate},
                {"decay_every", hp.decay_every},
                {"batch_size", hp.batch_size},
                {"n_meta_train", hp.n_meta_train},
                {"n_meta_test", hp.n_meta_test},
                {"local_loss", std::string(to_string(hp.local_loss))},
                {"outer_optimizer", "sgd"},
                {"outer_task_on_all", hp.outer_task_on_all}};
}

}  // namespace

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seeds must be non-empty");
    if (rows.empty()) throw ConfigError("at least one ablation row is required");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            if (rows[i] == rows[j]) throw ConfigError("duplicate ablation row " + rows[i].name());
        }
    }
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must be in (0, 1]");
    if (margin_pairs < 1) throw ConfigError("margin_pairs must be >= 1");
    hp.validate();
}

ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    try {
        const json j = json::parse(json_text);
        check_keys(j,
                   {"benchmark", "data_seed", "architecture", "hyperparams", "rows", "seeds", "targets",
                    "iterations", "output_dir", "train_fraction", "diag_every", "margin_pairs", "threads", "plots",
                    "checkpoint_every", "write_metrics"},
                   "config");
        if (!j.contains("benchmark")) throw ConfigError("config needs a 'benchmark' path");
        std::filesystem::path bench = j.at("benchmark").get<std::string>();
        c.benchmark = bench.is_relative() ? base_dir / bench : bench;
        read_opt(j, "data_seed", c.data_seed);
        if (j.contains("architecture")) {
            const auto& a = j.at("architecture");
            check_keys(a, {"feature_widths", "metric_widths"}, "architecture");
            read_opt(a, "feature_widths", c.arch.feature_widths);
            read_opt(a, "metric_widths", c.arch.metric_widths);
        }
        if (j.contains("hyperparams")) c.hp = parse_hyperparams(j.at("hyperparams"));
        if (j.contains("rows")) {
            const auto& r = j.at("rows");
            if (r.is_string() && r.get<std::string>() == "all") {
                c.rows = all_ablation_rows();
            } else {
                c.rows.clear();
                for (const auto& name : r) c.rows.push_back(parse_ablation_row(name.get<std::string>()));
            }
        }
        read_opt(j, "seeds", c.seeds);
        read_opt(j, "targets", c.targets);
        read_opt(j, "iterations", c.iterations);
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        read_opt(j, "train_fraction", c.train_fraction);
        read_opt(j, "diag_every", c.diag_every);
        read_opt(j, "margin_pairs", c.margin_pairs);
        read_opt(j, "threads", c.threads);
        read_opt(j, "plots", c.plots);
        read_opt(j, "checkpoint_every", c.checkpoint_every);
        read_opt(j, "write_metrics", c.write_metrics);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.hp.max_iterations = c.iterations;
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    return parse_experiment_config(text, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

std::string experiment_config_json(const ExperimentConfig& c) {
    json j;
    j["benchmark"] = c.benchmark.string();
    j["data_seed"] = c.data_seed;
    j["architecture"] = {{"feature_widths", c.arch.feature_widths}, {"metric_widths", c.arch.metric_widths}};
    j["hyperparams"] = hyperparams_json(c.hp);
    json rows = json::array();
    for (const auto& r : c.rows) rows.push_back(r.name());
    j["rows"] = rows;
    j["seeds"] = c.seeds;
    j["targets"] = c.targets;
    j["iterations"] = c.iterations;
    j["output_dir"] = c.output_dir.string();
    j["train_fraction"] = c.train_fraction;
    j["diag_every"] = c.diag_every;
    j["margin_pairs"] = c.margin_pairs;
    j["threads"] = c.threads;
    j["plots"] = c.plots;
    j["checkpoint_every"] = c.checkpoint_every;
    j["write_metrics"] = c.write_metrics;
    return j.dump(2) + "\n";
}

std::string report_csv(const Report& report) {
    std::string out = "target,episodic,global,local,seed,accuracy\n";
    for (const auto& r : report.runs) {
        const auto& f = r.key.flags;
        out += std::to_string(r.target_domain) + "," + (f.episodic ? "1" : "0") + "," + (f.global ? "1" : "0") +
               "," + (f.local ? "1" : "0") + "," + std::to_string(r.key.seed) + "," +
               (r.accuracy ? fmt_double(*r.accuracy, "%.6f") : std::string("failed")) + "\n";
    }
    return out;
}

std::string diagnostics_csv(const Report& report) {
    std::string out =
        "target,episodic,global,local,seed,initial_accuracy,margin,margin_se,alignment,silhouette,status\n";
    for (const auto& r : report.runs) {
        const auto& f = r.key.flags;
        std::string status = r.accuracy ? "ok" : r.error;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        out += std::to_string(r.target_domain) + "," + (f.episodic ? "1" : "0") + "," + (f.global ? "1" : "0") +
               "," + (f.local ? "1" : "0") + "," + std::to_string(r.key.seed) + "," +
               fmt_double(r.initial_accuracy, "%.6f") + ",";
        if (r.accuracy) {
            out += fmt_double(r.margin, "%.6g") + "," + fmt_double(r.margin_se, "%.6g") + "," +
                   fmt_double(r.alignment, "%.6g") + "," + fmt_double(r.silhouette, "%.6g");
        } else {
            out += ",,,";
        }
        out += "," + status + "\n";
    }
    return out;
}

std::string summary_csv(const Report& report) {
    std::string out = "target,row,episodic,global,local,n,mean,std\n";
    for (const auto& s : report.summary) {
        const auto& f = s.flags;
        out += s.target + "," + f.name() + "," + (f.episodic ? "1" : "0") + "," + (f.global ? "1" : "0") + "," +
               (f.local ? "1" : "0") + "," + std::to_string(s.n) + "," +
               (s.mean ? fmt_double(*s.mean, "%.6f") : std::string("failed")) + "," +
               (s.stddev ? fmt_double(*s.stddev, "%.6f") : std::string("n/a")) + "\n";
    }
    return out;
}

std::string metrics_csv(std::span<const MetricsRecord> records) {
    std::string out =
        "iteration,task,global,local,eta,alpha,gamma,inner_grad_norm,outer_grad_norm,phi_grad_norm,margin,"
        "target_alignment\n";
    for (const auto& r : records) {
        out += std::to_string(r.iteration);
        for (double v : {r.task, r.global, r.local, r.eta, r.alpha, r.gamma, r.inner_grad_norm, r.outer_grad_norm,
                         r.phi_grad_norm}) {
            out += "," + fmt_double(v, "%.10g");
        }
        out += "," + (r.margin ? fmt_double(*r.margin, "%.10g") : std::string());
        out += "," + (r.target_alignment ? fmt_double(*r.target_alignment, "%.10g") : std::string());
        out += "\n";
    }
    return out;
}

std::string line_plot_svg(const std::string& title, const std::string& y_label, std::span<const PlotSeries> series) {
    constexpr double W = 720, H = 420, L = 70, R = 170, T = 40, B = 50;
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#e377c2", "#17becf"};

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = ymin + (ymax - ymin) * i / 4.0, xv = xmin + (xmax - xmin) * i / 4.0;
        o << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt_double(yv, "%.3g")
          << "</text>\n";
        o << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
          << fmt_double(xv, "%.4g") << "</text>\n";
    }
    o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">iteration</text>\n";
    o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">" << y_label << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = colors[k % 8];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << px(s.x[i]) << "," << py(s.y[i]) << " ";
        }
        o << "\"/>\n";
        const double ly = T + 16.0 * static_cast<double>(k);
        o << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
          << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

namespace {

struct CurveAccumulator {
    std::map<std::uint64_t, std::pair<double, std::size_t>> margin, alignment;
};

PlotSeries to_series(const std::string& name, const std::map<std::uint64_t, std::pair<double, std::size_t>>& m) {
    PlotSeries s;
    s.name = name;
    for (const auto& [it, acc] : m) {
        s.x.push_back(static_cast<double>(it));
        s.y.push_back(acc.first / static_cast<double>(acc.second));
    }
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

std::vector<std::filesystem::path> write_plots(const std::filesystem::path& experiment_dir) {
    const auto runs_dir = experiment_dir / "runs";
    if (!std::filesystem::is_directory(runs_dir)) throw IoError("no runs directory in " + experiment_dir.string());
    // target -> row name -> curves
    std::map<std::string, std::map<std::string, CurveAccumulator>> curves;
    std::vector<std::filesystem::path> run_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(runs_dir)) {
        if (entry.is_directory()) run_dirs.push_back(entry.path());
    }
    std::sort(run_dirs.begin(), run_dirs.end());
    for (const auto& dir : run_dirs) {
        const std::string id = dir.filename().string();
        const auto first = id.find('_'), last = id.rfind("_s");
        if (id.empty() || id[0] != 't' || first == std::string::npos || last == std::string::npos || last <= first) {
            continue;
        }
        const std::string target = id.substr(1, first - 1), row = id.substr(first + 1, last - first - 1);
        const auto path = dir / "metrics.csv";
        if (!std::filesystem::exists(path)) continue;
        std::istringstream in(read_text_file(path));
        std::string line;
        std::getline(in, line);
        auto& acc = curves[target][row];
        while (std::getline(in, line)) {
            const auto cells = split_csv_line(line);
            if (cells.size() < 12) continue;
            const auto it = std::stoull(cells[0]);
            if (!cells[10].empty()) {
                auto& [sum, n] = acc.margin[it];
                sum += std::stod(cells[10]);
                ++n;
            }
            if (!cells[11].empty()) {
                auto& [sum, n] = acc.alignment[it];
                sum += std::stod(cells[11]);
                ++n;
            }
        }
    }

    std::vector<std::filesystem::path> written;
    for (const auto& [target, rows] : curves) {
        std::vector<PlotSeries> margin, alignment;
        for (const auto& [row, acc] : rows) {
            if (!acc.margin.empty()) margin.push_back(to_series(row, acc.margin));
            if (!acc.alignment.empty()) alignment.push_back(to_series(row, acc.alignment));
        }
        if (!margin.empty()) {
            const auto p = experiment_dir / "plots" / ("margin_t" + target + ".svg");
            write_text_file(p, line_plot_svg("Unseen-domain distance margin, target " + target, "margin", margin));
            written.push_back(p);
        }
        if (!alignment.empty()) {
            const auto p = experiment_dir / "plots" / ("alignment_t" + target + ".svg");
            write_text_file(p, line_plot_svg("Source-target alignment loss, target " + target, "alignment loss",
                                             alignment));
            written.push_back(p);
        }
    }
    return written;
}

}  // namespace masf
