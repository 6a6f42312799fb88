#include "layermatch/config.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace layermatch {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(std::string_view value) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const auto comma = value.find(',', start);
        const auto item = trim(value.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (!item.empty()) out.emplace_back(item);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

double to_double(std::string_view key, std::string_view value) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(v)) {
        throw ConfigError(std::string(key), fmt::format("{}: '{}' is not a number", key, value));
    }
    return v;
}

std::uint64_t to_unsigned(std::string_view key, std::string_view value) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError(std::string(key), fmt::format("{}: '{}' is not a non-negative integer", key, value));
    }
    return v;
}

bool to_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError(std::string(key), fmt::format("{}: '{}' is not a boolean", key, value));
}

template <typename Parse>
auto wrap(std::string_view key, Parse&& parse) {
    try {
        return parse();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string(key), fmt::format("{}: {}", key, e.what()));
    }
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct KeySpec {
    std::string name;
    std::function<void(ExperimentPlan&, std::string_view)> set;
    std::function<std::string(const ExperimentPlan&)> get;
};

#define LM_DOUBLE(NAME, FIELD)                                                                         \
    KeySpec {                                                                                          \
        NAME, [](ExperimentPlan& p, std::string_view v) { p.FIELD = to_double(NAME, v); },             \
            [](const ExperimentPlan& p) { return fmt::format("{}", p.FIELD); }                         \
    }
#define LM_SIZE(NAME, FIELD)                                                                           \
    KeySpec {                                                                                          \
        NAME, [](ExperimentPlan& p, std::string_view v) { p.FIELD = to_unsigned(NAME, v); },           \
            [](const ExperimentPlan& p) { return fmt::format("{}", p.FIELD); }                         \
    }
#define LM_BOOL(NAME, FIELD)                                                                           \
    KeySpec {                                                                                          \
        NAME, [](ExperimentPlan& p, std::string_view v) { p.FIELD = to_bool(NAME, v); },               \
            [](const ExperimentPlan& p) { return fmt_bool(p.FIELD); }                                  \
    }
#define LM_PATH(NAME, FIELD)                                                                           \
    KeySpec {                                                                                          \
        NAME, [](ExperimentPlan& p, std::string_view v) { p.FIELD = std::filesystem::path(v); },       \
            [](const ExperimentPlan& p) { return p.FIELD.string(); }                                   \
    }

const std::vector<KeySpec>& key_table() {
    static const std::vector<KeySpec> table = {
        {"method", [](ExperimentPlan& p, std::string_view v) { p.base.method = wrap("method", [&] { return parse_method(v); }); },
         [](const ExperimentPlan& p) { return std::string(to_string(p.base.method)); }},
        {"methods",
         [](ExperimentPlan& p, std::string_view v) {
             p.methods.clear();
             for (const auto& item : split_list(v)) p.methods.push_back(wrap("methods", [&] { return parse_method(item); }));
             if (p.methods.empty()) throw ConfigError("methods", "methods: empty list");
         },
         [](const ExperimentPlan& p) {
             std::string out;
             const auto methods = p.methods.empty() ? std::vector<Method>{p.base.method} : p.methods;
             for (std::size_t i = 0; i < methods.size(); ++i) out += fmt::format("{}{}", i ? "," : "", to_string(methods[i]));
             return out;
         }},
        LM_SIZE("seed", base.seed),
        {"seeds",
         [](ExperimentPlan& p, std::string_view v) {
             p.seeds.clear();
             for (const auto& item : split_list(v)) p.seeds.push_back(to_unsigned("seeds", item));
             if (p.seeds.empty()) throw ConfigError("seeds", "seeds: empty list");
         },
         [](const ExperimentPlan& p) {
             std::string out;
             const auto seeds = p.seeds.empty() ? std::vector<std::uint64_t>{p.base.seed} : p.seeds;
             for (std::size_t i = 0; i < seeds.size(); ++i) out += fmt::format("{}{}", i ? "," : "", seeds[i]);
             return out;
         }},
        LM_PATH("output_dir", output_dir),

        {"dataset",
         [](ExperimentPlan& p, std::string_view v) {
             p.dataset.generator = wrap("dataset", [&] { return parse_generator(v); });
         },
         [](const ExperimentPlan& p) { return std::string(to_string(p.dataset.generator)); }},
        LM_SIZE("n_samples", dataset.n_samples),
        LM_DOUBLE("noise_sigma", dataset.noise_sigma),
        LM_SIZE("num_classes", dataset.num_classes),
        LM_SIZE("labels_per_class", dataset.labels_per_class),
        LM_SIZE("data_seed", data_seed),
        LM_SIZE("n_test", n_test),
        LM_PATH("idx_images", dataset.idx_images),
        LM_PATH("idx_labels", dataset.idx_labels),
        LM_PATH("idx_test_images", idx_test_images),
        LM_PATH("idx_test_labels", idx_test_labels),

        LM_DOUBLE("weak_sigma", base.aug.weak_jitter_sigma),
        LM_DOUBLE("strong_sigma", base.aug.strong_jitter_sigma),
        LM_DOUBLE("strong_mask_prob", base.aug.strong_mask_prob),

        {"hidden_dims",
         [](ExperimentPlan& p, std::string_view v) {
             p.base.hidden_dims.clear();
             for (const auto& item : split_list(v)) p.base.hidden_dims.push_back(to_unsigned("hidden_dims", item));
         },
         [](const ExperimentPlan& p) { return join_sizes(p.base.hidden_dims); }},
        LM_SIZE("feature_dim", base.feature_dim),
        {"activation",
         [](ExperimentPlan& p, std::string_view v) {
             p.base.activation = wrap("activation", [&] { return parse_activation(v); });
         },
         [](const ExperimentPlan& p) { return std::string(to_string(p.base.activation)); }},

        LM_SIZE("iterations", base.iterations),
        LM_DOUBLE("lr", base.lr),
        LM_DOUBLE("sgd_momentum", base.sgd_momentum),
        LM_DOUBLE("weight_decay", base.weight_decay),
        LM_SIZE("batch_labeled", base.batch_labeled),
        LM_SIZE("batch_unlabeled", base.batch_unlabeled),

        {"threshold",
         [](ExperimentPlan& p, std::string_view v) {
             p.base.threshold = wrap("threshold", [&] { return parse_threshold_kind(v); });
         },
         [](const ExperimentPlan& p) { return std::string(to_string(p.base.threshold)); }},
        LM_DOUBLE("tau", base.tau),
        LM_DOUBLE("tau_momentum", base.tau_momentum),
        LM_DOUBLE("w_u", base.w_u),
        LM_DOUBLE("w_ac", base.w_ac),

        LM_SIZE("avg_period", base.avg_period),
        LM_DOUBLE("avg_momentum", base.avg_momentum),
        LM_DOUBLE("avg_step", base.avg_step),

        LM_DOUBLE("model_ema_momentum", base.model_ema_momentum),
        LM_DOUBLE("prediction_ema_momentum", base.prediction_ema_momentum),
        LM_BOOL("pseudo_from_ema", base.pseudo_from_ema),

        LM_BOOL("grad_relu", base.grad_relu),
        LM_BOOL("avg_clustering", base.avg_clustering),
        LM_BOOL("share_strong_aug", base.share_strong_aug),
        LM_BOOL("ac_theta_coupling", base.ac_theta_coupling),
        LM_BOOL("eval_with_beta_bar", base.eval_with_beta_bar),

        LM_SIZE("eval_every", base.eval_every),
    };
    return table;
}

#undef LM_DOUBLE
#undef LM_SIZE
#undef LM_BOOL
#undef LM_PATH

const KeySpec* find_key(std::string_view key) {
    for (const auto& spec : key_table()) {
        if (spec.name == key) return &spec;
    }
    return nullptr;
}

// Keys that cannot be swept: they define the matrix itself.
bool sweepable(std::string_view key) {
    return key != "method" && key != "methods" && key != "seed" && key != "seeds" && key != "output_dir";
}

void validate_plan(const ExperimentPlan& plan) {
    plan.base.validate();
    if (plan.base.iterations == 0) throw ConfigError("iterations", "iterations must be at least 1");
    const double floor = 1.0 / static_cast<double>(std::max<std::size_t>(plan.dataset.num_classes, 2));
    if (plan.base.tau <= floor) {
        throw ConfigError("tau", fmt::format("tau = {} must exceed 1/num_classes = {}", plan.base.tau, floor));
    }
    try {
        plan.dataset.validate();
    } catch (const ArgumentError& e) {
        const std::string msg = e.what();
        std::string key = "dataset";
        if (msg.find("num_classes") != std::string::npos) key = "num_classes";
        else if (msg.find("noise_sigma") != std::string::npos) key = "noise_sigma";
        else if (msg.find("labels per class") != std::string::npos) key = "labels_per_class";
        throw ConfigError(key, fmt::format("{}: {}", key, msg));
    }
    if (plan.dataset.generator == Generator::idx_file &&
        (plan.dataset.idx_images.empty() || plan.dataset.idx_labels.empty())) {
        throw ConfigError("idx_images", "idx_file dataset requires idx_images and idx_labels");
    }
    if (plan.n_test == 0 && plan.idx_test_images.empty()) throw ConfigError("n_test", "n_test must be at least 1");
}

} // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& spec : key_table()) out.push_back(spec.name);
    return out;
}

void apply_setting(ExperimentPlan& plan, std::string_view key, std::string_view value) {
    if (key.starts_with("sweep.")) {
        const std::string target(key.substr(6));
        if (!find_key(target)) throw ConfigError(std::string(key), fmt::format("unknown key {}", key));
        if (!sweepable(target)) throw ConfigError(std::string(key), fmt::format("{} cannot be swept", target));
        SweepAxis axis{target, split_list(value)};
        if (axis.values.empty()) throw ConfigError(std::string(key), fmt::format("{}: empty sweep", key));
        auto it = std::find_if(plan.sweeps.begin(), plan.sweeps.end(), [&](const SweepAxis& a) { return a.key == target; });
        if (it != plan.sweeps.end()) *it = std::move(axis);
        else plan.sweeps.push_back(std::move(axis));
        return;
    }
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError(std::string(key), fmt::format("unknown key {}", key));
    spec->set(plan, value);
}

ExperimentPlan parse_config_text(std::string_view text, const std::map<std::string, std::string>& overrides) {
    ExperimentPlan plan;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(std::string(line), fmt::format("line {}: expected 'key = value'", line_no));
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("", fmt::format("line {}: empty key", line_no));
        apply_setting(plan, key, value);
    }
    for (const auto& [key, value] : overrides) apply_setting(plan, key, value);
    validate_plan(plan);
    for (const auto& axis : plan.sweeps) {
        for (const auto& value : axis.values) {
            ExperimentPlan probe = plan;
            try {
                apply_setting(probe, axis.key, value);
                validate_plan(probe);
            } catch (const ConfigError& e) {
                throw ConfigError("sweep." + axis.key, fmt::format("sweep.{} = {}: {}", axis.key, value, e.what()));
            }
        }
    }
    return plan;
}

ExperimentPlan parse_config_file(const std::filesystem::path& path,
                                 const std::map<std::string, std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", fmt::format("cannot open config file {}", path.string()));
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str(), overrides);
}

std::string dump_plan(const ExperimentPlan& plan) {
    std::string out;
    for (const auto& spec : key_table()) out += fmt::format("{} = {}\n", spec.name, spec.get(plan));
    for (const auto& axis : plan.sweeps) {
        out += fmt::format("sweep.{} = ", axis.key);
        for (std::size_t i = 0; i < axis.values.size(); ++i) out += fmt::format("{}{}", i ? "," : "", axis.values[i]);
        out += '\n';
    }
    return out;
}

std::string Cell::variant() const {
    std::string out;
    for (std::size_t i = 0; i < sweep_point.size(); ++i) {
        out += fmt::format("{}{}={}", i ? ";" : "", sweep_point[i].first, sweep_point[i].second);
    }
    return out;
}

std::string Cell::name() const {
    std::string out(to_string(method));
    for (const auto& [key, value] : sweep_point) {
        std::string safe = value;
        std::replace_if(safe.begin(), safe.end(), [](char c) { return !(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-'); }, '_');
        out += fmt::format("__{}-{}", key, safe);
    }
    out += fmt::format("__seed{}", seed);
    return out;
}

std::vector<Cell> enumerate_cells(const ExperimentPlan& plan) {
    const auto methods = plan.methods.empty() ? std::vector<Method>{plan.base.method} : plan.methods;
    const auto seeds = plan.seeds.empty() ? std::vector<std::uint64_t>{plan.base.seed} : plan.seeds;

    std::vector<std::vector<std::pair<std::string, std::string>>> points{{}};
    for (const auto& axis : plan.sweeps) {
        std::vector<std::vector<std::pair<std::string, std::string>>> next;
        for (const auto& prefix : points) {
            for (const auto& value : axis.values) {
                auto p = prefix;
                p.emplace_back(axis.key, value);
                next.push_back(std::move(p));
            }
        }
        points = std::move(next);
    }

    std::vector<Cell> cells;
    for (Method m : methods) {
        for (std::uint64_t s : seeds) {
            for (const auto& point : points) cells.push_back({m, s, point});
        }
    }
    return cells;
}

ExperimentPlan resolve_cell(const ExperimentPlan& plan, const Cell& cell) {
    ExperimentPlan out = plan;
    out.base.method = cell.method;
    out.base.seed = cell.seed;
    for (const auto& [key, value] : cell.sweep_point) apply_setting(out, key, value);
    out.methods = {cell.method};
    out.seeds = {cell.seed};
    out.sweeps.clear();
    validate_plan(out);
    return out;
}

TrainingData build_training_data(const ExperimentPlan& plan, std::uint64_t split_seed) {
    DatasetSpec spec = plan.dataset;
    spec.seed = plan.data_seed;
    std::vector<Example> pool = generate(spec);
    std::vector<Example> test;
    if (spec.generator == Generator::idx_file) {
        if (!plan.idx_test_images.empty()) {
            test = load_idx(plan.idx_test_images, plan.idx_test_labels);
        } else {
            if (plan.n_test >= pool.size()) throw ConfigError("n_test", "n_test leaves no training data");
            test.assign(pool.end() - static_cast<std::ptrdiff_t>(plan.n_test), pool.end());
            pool.resize(pool.size() - plan.n_test);
        }
    } else {
        DatasetSpec test_spec = spec;
        test_spec.n_samples = plan.n_test;
        test_spec.labels_per_class = 0;
        test_spec.seed = plan.data_seed ^ 0x9e3779b97f4a7c15ULL;
        test = generate(test_spec);
    }

    SplitResult parts = split(pool, spec.labels_per_class, split_seed);
    TrainingData data;
    int max_label = 0;
    for (const auto& e : pool) max_label = std::max(max_label, e.true_label);
    data.num_classes = std::max<std::size_t>(spec.num_classes, static_cast<std::size_t>(max_label) + 1);
    data.labeled = make_labeled_pool(parts.labeled);
    data.unlabeled = make_unlabeled_pool(parts.unlabeled);
    data.unlabeled_truth = make_diagnostic_labels(parts.unlabeled);
    for (auto& e : test) e.label = e.true_label;
    data.test = make_labeled_pool(test);
    return data;
}

} // namespace layermatch
