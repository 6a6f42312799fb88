#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cli.hpp"
#include "layermatch/config.hpp"
#include "layermatch/errors.hpp"
#include "layermatch/experiment.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace layermatch;
namespace fs = std::filesystem;

namespace {

const char* kSmallPlan = R"(# tiny plan
n_samples = 208
n_test = 50
iterations = 40
eval_every = 20
hidden_dims = 8
feature_dim = 4
batch_unlabeled = 16
tau = 0.7
)";

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("layermatch_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& extra) {
    const fs::path path = dir / "plan.conf";
    std::ofstream(path) << kSmallPlan << extra;
    return path;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CliResult {
    int status = 0;
    std::string out;
    std::string err;
};

CliResult invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "layermatch");
    std::ostringstream out, err;
    const int status = cli::run(args, out, err);
    return {status, out.str(), err.str()};
}

std::string config_error_key(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        return e.key();
    }
    return {};
}

std::set<fs::path> files_under(const fs::path& root) {
    std::set<fs::path> out;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file()) out.insert(fs::relative(entry.path(), root));
    }
    return out;
}

} // namespace

TEST_CASE("minimal config fills every other key with defaults") {
    const ExperimentPlan plan = parse_config_text("method = fixmatch\nseed = 3\n");
    CHECK(plan.base.method == Method::fixmatch);
    CHECK(plan.base.seed == 3);
    const auto cells = enumerate_cells(plan);
    REQUIRE(cells.size() == 1);
    CHECK(cells[0].method == Method::fixmatch);
    CHECK(cells[0].seed == 3);
    const std::string dump = dump_plan(plan);
    for (const auto& key : config_keys()) {
        if (key.rfind("sweep.", 0) == 0) continue;
        CHECK_MESSAGE((dump.find("\n" + key + " = ") != std::string::npos || dump.rfind(key + " = ", 0) == 0), key);
    }
    CHECK(dump.find("tau = 0.95\n") != std::string::npos);
    CHECK(dump.find("avg_period = 2048\n") != std::string::npos);
    CHECK(parse_config_text(dump).base.tau == plan.base.tau);
    CHECK(dump_plan(parse_config_text(dump)) == dump);
}

TEST_CASE("config strictness") {
    try {
        parse_config_text("taau = 0.9\n");
        FAIL("unknown key accepted");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "taau");
        CHECK(std::string(e.what()) == "unknown key taau");
    }
    CHECK(config_error_key("tau = 1.5\n") == "tau");
    CHECK(config_error_key("tau = 0.4\nnum_classes = 2\n") == "tau");
    CHECK(config_error_key("iterations = many\n") == "iterations");
    CHECK(config_error_key("iterations = 0\n") == "iterations");
    CHECK(config_error_key("lr = -1\n") == "lr");
    CHECK(config_error_key("method = mixmatch\n") == "method");
    CHECK(config_error_key("activation = gelu\n") == "activation");
    CHECK(config_error_key("grad_relu = maybe\n") == "grad_relu");
    CHECK(config_error_key("just some words\n") != "");
    CHECK(config_error_key("sweep.seed = 1, 2\n") == "sweep.seed");
    CHECK(config_error_key("sweep.tau = 0.9, 1.2\n") == "sweep.tau");
    CHECK(config_error_key("sweep.bogus = 1\n") == "sweep.bogus");
    CHECK(config_error_key("dataset = idx_file\n") != "");
    CHECK(config_error_key("# only a comment\n\n   \n").empty());
}

TEST_CASE("overrides are applied after the file") {
    const ExperimentPlan plan = parse_config_text("tau = 0.9\nseed = 1\n", {{"tau", "0.8"}});
    CHECK(plan.base.tau == 0.8);
    CHECK(plan.base.seed == 1);
}

TEST_CASE("cells enumerate method, seed, then sweep points") {
    ExperimentPlan plan = parse_config_text("methods = fixmatch, layermatch\nseeds = 0, 1, 2\n");
    auto cells = enumerate_cells(plan);
    REQUIRE(cells.size() == 6);
    CHECK(cells[0].name() == "fixmatch__seed0");
    CHECK(cells[2].name() == "fixmatch__seed2");
    CHECK(cells[3].name() == "layermatch__seed0");
    CHECK(cells[0].variant().empty());

    plan = parse_config_text("methods = layermatch\nseeds = 0, 1\nsweep.avg_period = 1, 2048, 204800\n"
                             "sweep.w_ac = 0, 1\n");
    cells = enumerate_cells(plan);
    REQUIRE(cells.size() == 12);
    CHECK(cells[0].name() == "layermatch__avg_period-1__w_ac-0__seed0");
    CHECK(cells[1].name() == "layermatch__avg_period-1__w_ac-1__seed0");
    CHECK(cells[2].variant() == "avg_period=2048;w_ac=0");
    CHECK(cells[6].seed == 1);
    const ExperimentPlan resolved = resolve_cell(plan, cells[5]);
    CHECK(resolved.base.avg_period == 204800);
    CHECK(resolved.base.w_ac == 1.0);
}

TEST_CASE("summary rows use the sample standard deviation") {
    const SummaryRow same = summary_row("layermatch", "", {0.9, 0.9, 0.9});
    CHECK(same.mean == doctest::Approx(0.9));
    REQUIRE(same.two_sigma.has_value());
    CHECK(*same.two_sigma == doctest::Approx(0.0));
    const SummaryRow pair = summary_row("fixmatch", "", {0.8, 1.0});
    CHECK(pair.mean == doctest::Approx(0.9));
    CHECK(*pair.two_sigma == doctest::Approx(0.28284271247461906));
    CHECK_FALSE(summary_row("x", "", {0.7}).two_sigma.has_value());
}

TEST_CASE("report renderings") {
    Summary s;
    s.rows.push_back(summary_row("layermatch", "", {0.9, 0.9, 0.9}));
    s.rows.push_back(summary_row("fixmatch", "avg_period=1", {0.8, 1.0}));
    s.rows.push_back(summary_row("supervised_only", "", {0.755}));

    const std::string csv = render_report(s, "csv");
    CHECK(csv == "method,variant,seeds,mean_acc,two_sigma,accuracy\n"
                 "layermatch,,3,90.00,0.00,90.00 ± 0.00\n"
                 "fixmatch,avg_period=1,2,90.00,28.28,90.00 ± 28.28\n"
                 "supervised_only,,1,75.50,,75.50\n");

    const auto json = nlohmann::json::parse(render_report(s, "json"));
    REQUIRE(json.is_array());
    REQUIRE(json.size() == 3);
    CHECK(json[1]["method"] == "fixmatch");
    CHECK(json[1]["mean_acc"] == "90.00");
    CHECK(json[1]["two_sigma"] == "28.28");
    CHECK(json[1]["accuracy"] == "90.00 ± 28.28");

    const std::string text = render_report(s, "text");
    CHECK(text.find("90.00 ± 28.28") != std::string::npos);
    CHECK(text.find("supervised_only") != std::string::npos);

    CHECK_THROWS_AS(render_report(s, "xml"), ArgumentError);
    CHECK_THROWS_AS(render_report(Summary{}, "csv"), ArgumentError);
}

TEST_CASE("summaries group successful outcomes in first-seen order") {
    std::vector<CellOutcome> outcomes;
    auto add = [&](Method m, std::uint64_t seed, bool ok, double acc) {
        CellOutcome o;
        o.cell = Cell{m, seed, {}};
        o.ok = ok;
        o.final_accuracy = acc;
        outcomes.push_back(o);
    };
    add(Method::layermatch, 0, true, 0.9);
    add(Method::fixmatch, 0, true, 0.8);
    add(Method::layermatch, 1, false, 0.0);
    add(Method::layermatch, 2, true, 0.7);
    const Summary s = summarize(outcomes);
    REQUIRE(s.rows.size() == 2);
    CHECK(s.rows[0].method == "layermatch");
    CHECK(s.rows[0].accuracies == std::vector<double>{0.9, 0.7});
    CHECK(s.rows[1].method == "fixmatch");
}

TEST_CASE("matrix writes per-cell outputs and a summary, all under output_dir") {
    const fs::path root = fresh_dir("matrix");
    const fs::path out = root / "out";
    const fs::path config = write_config(root, "methods = supervised_only, fixmatch\nseeds = 0, 1, 2\n");
    const auto cwd_before = files_under(fs::current_path());
    const CliResult r = invoke({"matrix", "--config", config.string(), "--jobs", "2", "--out", out.string()});
    REQUIRE(r.status == 0);
    CHECK(r.out.find("fixmatch") != std::string::npos);

    std::size_t metrics = 0, checkpoints = 0;
    for (const auto& f : files_under(out)) {
        if (f.filename() == "metrics.csv") ++metrics;
        if (f.filename() == "checkpoint.lmck") ++checkpoints;
    }
    CHECK(metrics == 6);
    CHECK(checkpoints == 6);
    for (const char* name : {"summary.csv", "summary.json", "summary.txt", "runs.csv"}) CHECK(fs::exists(out / name));
    CHECK(fs::exists(out / "fixmatch__seed1" / "resolved.conf"));

    std::set<fs::path> top;
    for (const auto& e : fs::directory_iterator(root)) top.insert(e.path().filename());
    CHECK(top == std::set<fs::path>{"plan.conf", "out"});
    CHECK(files_under(fs::current_path()) == cwd_before);

    const std::string runs = read_file(out / "runs.csv");
    CHECK(std::count(runs.begin(), runs.end(), '\n') == 7);

    const CliResult csv = invoke({"report", "--in", out.string(), "--format", "csv"});
    CHECK(csv.status == 0);
    CHECK(csv.out == read_file(out / "summary.csv"));
    const CliResult json = invoke({"report", "--in", out.string(), "--format", "json"});
    CHECK(json.out == read_file(out / "summary.json"));
    const auto parsed = nlohmann::json::parse(json.out);
    std::istringstream lines(csv.out);
    std::string line;
    std::getline(lines, line);
    for (const auto& row : parsed) {
        REQUIRE(std::getline(lines, line));
        CHECK(line.find(row["mean_acc"].get<std::string>()) != std::string::npos);
        CHECK(line.find(row["two_sigma"].get<std::string>()) != std::string::npos);
    }
    CHECK(invoke({"report", "--in", out.string(), "--format", "xml"}).status == 1);
    fs::remove_all(root);
}

TEST_CASE("single seed leaves the sigma column empty") {
    const fs::path root = fresh_dir("single");
    const fs::path config = write_config(root, "methods = fixmatch\nseeds = 4\noutput_dir = " + (root / "o").string() + "\n");
    REQUIRE(invoke({"matrix", "--config", config.string()}).status == 0);
    const std::string csv = read_file(root / "o" / "summary.csv");
    CHECK(csv.find("\nfixmatch,,1,") != std::string::npos);
    CHECK(csv.find(",,") != std::string::npos);
    const auto json = nlohmann::json::parse(read_file(root / "o" / "summary.json"));
    CHECK(json[0]["two_sigma"].is_null());
    fs::remove_all(root);
}

TEST_CASE("matrix resumes by skipping cells with a checkpoint") {
    const fs::path root = fresh_dir("resume");
    ExperimentPlan plan = parse_config_text(std::string(kSmallPlan) + "methods = fixmatch, layermatch\nseeds = 0, 1\n");
    plan.output_dir = root / "out";
    const MatrixResult first = run_matrix(plan, 1);
    REQUIRE(first.failed == 0);
    const std::string summary = read_file(plan.output_dir / "summary.csv");

    const auto victim = cell_directory(plan, Cell{Method::layermatch, 1, {}});
    fs::remove(victim / "checkpoint.lmck");
    std::size_t skipped = 0, trained = 0;
    const MatrixResult second = run_matrix(plan, 1, [&](const CellOutcome& o) { (o.skipped ? skipped : trained)++; });
    CHECK(skipped == 3);
    CHECK(trained == 1);
    CHECK(fs::exists(victim / "checkpoint.lmck"));
    CHECK(read_file(plan.output_dir / "summary.csv") == summary);
    for (std::size_t i = 0; i < first.outcomes.size(); ++i) {
        CHECK(first.outcomes[i].final_accuracy == second.outcomes[i].final_accuracy);
    }
    CHECK_THROWS_AS(run_matrix(plan, 0), ArgumentError);
    fs::remove_all(root);
}

TEST_CASE("matrix output is independent of the job count") {
    const fs::path root = fresh_dir("jobs");
    const fs::path config = write_config(root, "methods = fixmatch, layermatch\nseeds = 0, 1\n");
    REQUIRE(invoke({"matrix", "--config", config.string(), "--jobs", "1", "--out", (root / "a").string()}).status == 0);
    REQUIRE(invoke({"matrix", "--config", config.string(), "--jobs", "3", "--out", (root / "b").string()}).status == 0);
    const auto files = files_under(root / "a");
    REQUIRE(files == files_under(root / "b"));
    for (const auto& f : files) {
        INFO(f.string());
        if (f.filename() == "resolved.conf") continue;
        CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));
    }
    fs::remove_all(root);
}

TEST_CASE("a failing cell is recorded and the matrix continues") {
    const fs::path root = fresh_dir("failing");
    const fs::path config =
        write_config(root, "methods = supervised_only\nseeds = 0\nactivation = identity\nsgd_momentum = 0\n"
                           "sweep.lr = 0.03, 1e200\n");
    const CliResult r = invoke({"matrix", "--config", config.string(), "--out", (root / "o").string()});
    CHECK(r.status == 1);
    CHECK(r.err.find("[fail]") != std::string::npos);
    CHECK(r.err.find("1 of 2 cells failed") != std::string::npos);
    const auto outcomes = read_runs_csv(root / "o");
    REQUIRE(outcomes.size() == 2);
    CHECK(outcomes[0].ok);
    CHECK_FALSE(outcomes[1].ok);
    CHECK(outcomes[1].error.find("iteration") != std::string::npos);
    CHECK(fs::exists(root / "o" / "summary.csv"));
    fs::remove_all(root);
}

TEST_CASE("train writes metrics, resolved config and checkpoint") {
    const fs::path root = fresh_dir("train");
    const fs::path config = write_config(root, "method = fixmatch\n");
    const CliResult r = invoke({"train", "--config", config.string(), "--method", "layermatch", "--seed", "2", "--out",
                                (root / "run").string(), "--set", "iterations=30"});
    REQUIRE(r.status == 0);
    CHECK(r.out.rfind("layermatch seed 2: test accuracy ", 0) == 0);
    for (const char* f : {"metrics.csv", "resolved.conf", "checkpoint.lmck"}) CHECK(fs::exists(root / "run" / f));
    const std::string resolved = read_file(root / "run" / "resolved.conf");
    CHECK(resolved.find("iterations = 30\n") != std::string::npos);
    CHECK(resolved.find("method = layermatch\n") != std::string::npos);
    const std::string metrics = read_file(root / "run" / "metrics.csv");
    CHECK(metrics.rfind("iteration,loss_s,loss_u,loss_ac,test_acc,gamma,upsilon,tau,lr\n", 0) == 0);
    CHECK(metrics.find("\n20,") != std::string::npos);
    CHECK(metrics.find("\n30,") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("seed precedence: file, environment, --set, flag") {
    const fs::path root = fresh_dir("seed");
    const fs::path config = write_config(root, "seed = 1\n");
    auto dumped_seed = [&](std::vector<std::string> extra) {
        std::vector<std::string> args{"train", "--config", config.string(), "--dump-config"};
        args.insert(args.end(), extra.begin(), extra.end());
        const CliResult r = invoke(args);
        const auto pos = r.out.find("\nseed = ");
        return r.out.substr(pos + 8, r.out.find('\n', pos + 1) - pos - 8);
    };
    CHECK(dumped_seed({}) == "1");
    ::setenv("LAYERMATCH_SEED", "7", 1);
    CHECK(dumped_seed({}) == "7");
    CHECK(dumped_seed({"--set", "seed=8"}) == "8");
    CHECK(dumped_seed({"--set", "seed=8", "--seed", "9"}) == "9");
    ::setenv("LAYERMATCH_SEED", "x", 1);
    CHECK(invoke({"train", "--config", config.string(), "--dump-config"}).status == 2);
    ::unsetenv("LAYERMATCH_SEED");
    fs::remove_all(root);
}

TEST_CASE("config errors exit with status 2 and name the key") {
    const fs::path root = fresh_dir("errors");
    const fs::path bad = root / "bad.conf";
    std::ofstream(bad) << "tau = 1.5\n";
    const CliResult r = invoke({"train", "--config", bad.string(), "--dump-config"});
    CHECK(r.status == 2);
    CHECK(r.err.find("tau") != std::string::npos);
    std::ofstream(bad) << "taau = 0.9\n";
    const CliResult typo = invoke({"train", "--config", bad.string(), "--dump-config"});
    CHECK(typo.status == 2);
    CHECK(typo.err.find("unknown key taau") != std::string::npos);
    CHECK(invoke({"train", "--config", (root / "missing.conf").string()}).status != 0);
    CHECK(invoke({"train", "--config", bad.string(), "--set", "noequals"}).status == 1);
    CHECK(invoke({}).status != 0);
    fs::remove_all(root);
}

TEST_CASE("verify subcommands") {
    const CliResult chain = invoke({"verify", "--check", "chainrule", "--format", "csv", "--trials", "20"});
    CHECK(chain.status == 0);
    CHECK(chain.out.rfind("check,quantity,value,threshold,pass\nchainrule,max_abs_deviation.20_models,", 0) == 0);

    const CliResult lemma = invoke({"verify", "--check", "lemma41", "--format", "csv"});
    CHECK(lemma.status == 0);
    CHECK(lemma.out.find("lemma41,abs_error.h=0.01,") != std::string::npos);
    CHECK(lemma.out.find("reduction_factor.h=0.05") != std::string::npos);
    CHECK(lemma.out.find("false") == std::string::npos);

    const CliResult grad = invoke({"verify", "--check", "gradcheck"});
    CHECK(grad.status == 0);
    CHECK(grad.out.find("PASS") != std::string::npos);
    CHECK(grad.out.find("FAIL") == std::string::npos);

    const CliResult coarse = invoke({"verify", "--check", "lemma41", "--spacings", "2,1"});
    CHECK(coarse.out.find("FAIL") != std::string::npos);
    CHECK(coarse.status == 1);

    CHECK(invoke({"verify", "--check", "fourier"}).status != 0);
    CHECK(invoke({"verify", "--check", "theorem42"}).status == 1);
    CHECK(invoke({"verify", "--check", "chainrule", "--format", "yaml"}).status == 1);

    const fs::path root = fresh_dir("verify");
    CHECK(invoke({"verify", "--check", "chainrule", "--trials", "5", "--out", (root / "v.csv").string(), "--format",
                  "csv"})
              .status == 0);
    CHECK(read_file(root / "v.csv").rfind("check,", 0) == 0);
    fs::remove_all(root);
}

TEST_CASE("satisfied-fraction verification from a config") {
    const fs::path root = fresh_dir("theorem");
    const fs::path config = write_config(root, "method = layermatch\niterations = 60\n");
    const CliResult r = invoke({"verify", "--check", "theorem42", "--config", config.string(), "--format", "csv"});
    CHECK(r.out.find("theorem42,fraction.t=20,") != std::string::npos);
    CHECK(r.out.find("theorem42,fraction.t=60,") != std::string::npos);
    CHECK(r.out.find("theorem42,smoothed_last_minus_first,") != std::string::npos);
    CHECK((r.status == 0 || r.status == 1));
    fs::remove_all(root);
}
