// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include <unistd.h>

#include "cmidd/cmi_oracle.hpp"
#include "cmidd/config.hpp"
#include "cmidd/distill.hpp"
#include "cmidd/eval.hpp"
#include "gradcheck.hpp"

using namespace cmidd;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass;
    std::string line;
};

std::map<int, Outcome> outcomes;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int id, bool pass, const std::string& what, const std::string& detail) {
    outcomes[id] = {pass, what + " (" + detail + ")"};
}

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::vector<int> balanced_labels(int classes, int ipc, std::mt19937_64& gen) {
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < ipc; ++i) labels.push_back(c);
    std::shuffle(labels.begin(), labels.end(), gen);
    return labels;
}

Matrix uniform(std::size_t r, std::size_t c, std::mt19937_64& gen, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(r, c);
    for (auto& v : m.data) v = u(gen);
    return m;
}

TrainedProxy random_proxy(std::size_t dim, int m, int classes, std::uint64_t seed) {
    ArchSpec a;
    a.input_shape = {dim};
    a.hidden_widths = {8, m};
    a.feature_dim = m;
    a.num_classes = classes;
    return build_model(a, seed);
}

double outputs_cmi(const Matrix& z, std::span<const int> labels) {
    return cmi_terms(ad::Var::constant(z), labels).total.item();
}

// ---- criteria 1-7: estimator and gradient properties ----------------------------

void oracle_equivalence() {
    auto t0 = Clock::now();
    std::mt19937_64 gen(1);
    double worst = 0;
    const int n = 200;
    for (int t = 0; t < n; ++t) {
        int classes = 2 + static_cast<int>(gen() % 4);
        int ipc = 1 + static_cast<int>(gen() % 8);
        int m = 2 + static_cast<int>(gen() % 15);
        auto labels = balanced_labels(classes, ipc, gen);
        if (t % 2 == 0) {
            Matrix z = uniform(labels.size(), static_cast<std::size_t>(m), gen, -4, 4);
            worst = std::max(worst, std::abs(outputs_cmi(z, labels) - oracle::cmi_from_outputs(z, labels)));
        } else {
            auto proxy = random_proxy(3, m, classes, gen());
            Matrix x = uniform(labels.size(), 3, gen, -2, 2);
            for (auto space : {CmiSpace::feature, CmiSpace::probability})
                worst = std::max(worst, std::abs(empirical_cmi(x, labels, proxy, space).total -
                                                 oracle::cmi_oracle(x, labels, proxy, space)));
        }
    }
    double secs = seconds_since(t0);
    report(1, worst <= 1e-10 && secs < 10, "vectorized CMI equals nested-loop oracle",
           fmt("%d instances, max abs error %.2e, %.2f s", n, worst, secs));
}

void decomposition() {
    auto t0 = Clock::now();
    std::mt19937_64 gen(2);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        int classes = 2 + static_cast<int>(gen() % 4);
        auto proxy = random_proxy(2, 2 + static_cast<int>(gen() % 15), classes, gen());
        auto labels = balanced_labels(classes, 1 + static_cast<int>(gen() % 8), gen);
        Matrix x = uniform(labels.size(), 2, gen, -2, 2);
        auto space = t % 2 ? CmiSpace::feature : CmiSpace::probability;
        double sum = 0;
        for (int y = 0; y < classes; ++y) sum += empirical_cmi_per_class(x, labels, proxy, space, y);
        worst = std::max(worst, std::abs(sum - empirical_cmi(x, labels, proxy, space).total));
    }
    double secs = seconds_since(t0);
    report(2, worst <= 1e-12 && secs < 5, "per-class contributions sum to the total",
           fmt("100 instances, max abs error %.2e, %.2f s", worst, secs));
}

void degeneracy() {
    std::mt19937_64 gen(3);
    double worst_single = 0, worst_identical = 0;
    for (int t = 0; t < 50; ++t) {
        int classes = 2 + static_cast<int>(gen() % 4);
        auto proxy = random_proxy(2, 2 + static_cast<int>(gen() % 15), classes, gen());
        std::vector<int> labels(static_cast<std::size_t>(classes));
        std::iota(labels.begin(), labels.end(), 0);
        Matrix x = uniform(labels.size(), 2, gen, -3, 3);
        for (auto space : {CmiSpace::feature, CmiSpace::probability})
            worst_single = std::max(worst_single, std::abs(empirical_cmi(x, labels, proxy, space).total));

        // Class 0 holds copies of one sample; the others vary.
        auto many = balanced_labels(classes, 2 + static_cast<int>(gen() % 6), gen);
        Matrix xs = uniform(many.size(), 2, gen, -3, 3);
        std::size_t first = std::find(many.begin(), many.end(), 0) - many.begin();
        for (std::size_t i = 0; i < many.size(); ++i)
            if (many[i] == 0) std::copy(xs.row(first).begin(), xs.row(first).end(), xs.row(i).begin());
        for (auto space : {CmiSpace::feature, CmiSpace::probability})
            worst_identical =
                std::max(worst_identical, std::abs(empirical_cmi(xs, many, proxy, space).per_class.at(0)));
    }
    report(3, worst_single <= 1e-9 && worst_identical <= 1e-9, "one sample per class or identical samples give zero",
           fmt("max |total| at ipc 1 %.2e, max identical-class term %.2e", worst_single, worst_identical));
}

void invariance_suite() {
    auto t0 = Clock::now();
    std::mt19937_64 gen(4);
    double min_cmi = 1e300, worst_shift = 0;
    int permutation_mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        int classes = 2 + static_cast<int>(gen() % 4);
        int m = 2 + static_cast<int>(gen() % 15);
        auto labels = balanced_labels(classes, 1 + static_cast<int>(gen() % 8), gen);
        auto proxy = random_proxy(3, m, classes, gen());
        Matrix x = uniform(labels.size(), 3, gen, -2, 2);
        auto space = t % 2 ? CmiSpace::feature : CmiSpace::probability;
        double total = empirical_cmi(x, labels, proxy, space).total;
        min_cmi = std::min(min_cmi, total);

        std::vector<std::size_t> perm(labels.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), gen);
        Matrix xp(x.rows, x.cols);
        std::vector<int> lp(labels.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
            lp[i] = labels[perm[i]];
        }
        if (empirical_cmi(xp, lp, proxy, space).total != total) ++permutation_mismatches;

        Matrix z = uniform(labels.size(), static_cast<std::size_t>(m), gen, -3, 3);
        Matrix shifted = z;
        std::uniform_real_distribution<double> shift(-5, 5);
        for (std::size_t r = 0; r < z.rows; ++r) {
            double c = shift(gen);
            for (auto& v : shifted.row(r)) v += c;
        }
        worst_shift = std::max(worst_shift, std::abs(outputs_cmi(z, labels) - outputs_cmi(shifted, labels)));
    }
    double secs = seconds_since(t0);
    report(4, min_cmi >= -1e-9 && permutation_mismatches == 0 && worst_shift <= 1e-12 && secs < 30,
           "non-negativity, permutation and shift invariance",
           fmt("1000 instances, min CMI %.2e, %d permutation mismatches, max shift error %.2e, %.2f s", min_cmi,
               permutation_mismatches, worst_shift, secs));
}

void gradient_fidelity() {
    auto t0 = Clock::now();
    double worst = 0;
    int cases = 0;
    for (auto objective : {Objective::dm, Objective::grad_match})
        for (auto space : {CmiSpace::feature, CmiSpace::probability})
            for (bool detach : {false, true})
                for (std::uint64_t seed : {11, 12, 13}) {
                    worst = std::max(worst, testing::check_loss_gradient(objective, space, detach, seed).max_relative_error);
                    ++cases;
                }
    double secs = seconds_since(t0);
    report(5, worst <= 1e-4 && secs < 60, "loss gradient matches central differences",
           fmt("%d cases over objective x space x detach, max relative error %.2e, %.2f s", cases, worst, secs));
}

void closed_forms() {
    std::vector<double> p{0.1, 0.2, 0.3, 0.4};
    double self = kl_divergence({p}, {p});
    double kl = kl_divergence({{0.5, 0.5}}, {{0.25, 0.75}});
    double kl_error = std::abs(kl - 0.5 * std::log(4.0 / 3.0));
    auto s = feature_softmax(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0), std::log(4.0)});
    double sm_error = 0;
    for (std::size_t i = 0; i < 4; ++i) sm_error = std::max(sm_error, std::abs(s[i] - p[i]));
    report(7, self == 0 && kl_error <= 1e-9 && sm_error <= 1e-9, "closed-form KL and softmax values",
           fmt("KL(p||p) = %g, KL error %.2e, softmax error %.2e", self, kl_error, sm_error));
}

// ---- criteria 6 and 8-11: the desk-scale blobs workload ---------------------------

struct Workload {
    nlohmann::json cfg;
    LabeledDataset train, test;
    double lambda0 = 0;
};

Workload load_workload() {
    Workload w;
    ConfigSources src;
    src.file = std::filesystem::path(CMIDD_SOURCE_DIR) / "configs" / "blobs_dm.json";
    w.cfg = resolve_config(src);
    w.lambda0 = w.cfg["distill"]["lambda"].get<double>();
    DataSplit split = generate_data(w.cfg);
    w.train = std::move(split.train);
    w.test = std::move(split.test);
    return w;
}

DistillConfig with(const Workload& w, double lambda, int cmi_every = 1) {
    DistillConfig dc = distill_config_from(w.cfg);
    dc.lambda = lambda;
    dc.cmi_every = cmi_every;
    return dc;
}

std::string checkpoint_bytes(const SyntheticDataset& s) {
    auto dir = std::filesystem::temp_directory_path() / ("cmidd_acceptance_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    save_synthetic(s, dir);
    std::string bytes;
    for (const char* f : {"manifest.json", "samples.bin", "labels.bin"}) {
        std::ifstream in(dir / f, std::ios::binary);
        bytes += std::string(std::istreambuf_iterator<char>(in), {});
    }
    std::filesystem::remove_all(dir);
    return bytes;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void workload_criteria() {
    Workload w = load_workload();
    const EvalConfig ev = eval_config_from(w.cfg);
    const DistillConfig base = with(w, 0.0);

    // Criterion 8: everything from data generation to both evaluations.
    auto t0 = Clock::now();
    DistillPools pools = make_pools(w.train, base);
    auto without = run_distillation(w.train, base, pools);
    auto with_cmi = run_distillation(w.train, with(w, w.lambda0), pools);
    EvalReport eval_without = repeated_eval(without.synthetic, ev, w.test);
    EvalReport eval_with = repeated_eval(with_cmi.synthetic, ev, w.test);
    double secs = seconds_since(t0);

    const double cmi0 = without.trace.final_monitor_cmi(), cmi1 = with_cmi.trace.final_monitor_cmi();
    const double acc0 = eval_without.archs[0].mean_top1, acc1 = eval_with.archs[0].mean_top1;
    const bool a = cmi1 < cmi0, b = acc1 >= acc0 - 0.01, c = secs <= 300;
    report(8, a && b && c, fmt("CMI pressure on blobs at lambda %g", w.lambda0),
           fmt("(a) final CMI %.6f vs %.6f at lambda 0 %s; (b) top-1 %.4f vs %.4f %s; (c) %.1f s %s", cmi1, cmi0,
               a ? "ok" : "not lower", acc1, acc0, b ? "ok" : "dropped > 1 pp", secs, c ? "ok" : "too slow"));

    // Criterion 9.
    auto strong = run_distillation(w.train, with(w, 10 * w.lambda0), pools);
    const double cmi2 = strong.trace.final_monitor_cmi();
    report(9, cmi1 <= cmi0 && cmi2 <= cmi1, "final CMI is non-increasing in lambda",
           fmt("lambda 0, %g, %g: %.3e, %.3e, %.3e", w.lambda0, 10 * w.lambda0, cmi0, cmi1, cmi2));

    // Criterion 6: same seeds with the CMI path compiled out.
    auto compiled_out = run_distillation<CmiPath::disabled>(w.train, base, pools);
    double diff = 0;
    for (std::size_t i = 0; i < without.synthetic.samples.size(); ++i)
        diff = std::max(diff, std::abs(without.synthetic.samples.data[i] - compiled_out.synthetic.samples.data[i]));
    DistillConfig gm = base;
    gm.objective = Objective::grad_match;
    gm.iterations = 100;
    DistillPools gm_pools = make_pools(w.train, gm);
    auto gm_on = run_distillation(w.train, gm, gm_pools);
    auto gm_off = run_distillation<CmiPath::disabled>(w.train, gm, gm_pools);
    for (std::size_t i = 0; i < gm_on.synthetic.samples.size(); ++i)
        diff = std::max(diff, std::abs(gm_on.synthetic.samples.data[i] - gm_off.synthetic.samples.data[i]));
    report(6, diff <= 1e-12, "lambda 0 equals the compiled-out CMI path",
           fmt("dm and grad-match runs, max element difference %.2e", diff));

    // Criterion 10: a second run from scratch, pools included.
    Workload w2 = load_workload();
    DistillPools pools2 = make_pools(w2.train, with(w2, w2.lambda0));
    auto rerun = run_distillation(w2.train, with(w2, w2.lambda0), pools2);
    EvalReport eval_rerun = repeated_eval(rerun.synthetic, eval_config_from(w2.cfg), w2.test);
    const bool same_ckpt = checkpoint_bytes(rerun.synthetic) == checkpoint_bytes(with_cmi.synthetic);
    const bool same_report = to_json(eval_rerun).dump() == to_json(eval_with).dump();
    report(10, same_ckpt && same_report, "identical seeds reproduce checkpoint and report",
           fmt("checkpoint %s, eval report %s, fingerprint %s", same_ckpt ? "identical" : "differs",
               same_report ? "identical" : "differs", eval_rerun.fingerprint.c_str()));

    // Criterion 11: interleaved repeats, compared by median per-iteration time.
    std::vector<double> every1, every5;
    double cmi_every5 = 0;
    for (int rep = 0; rep < 5; ++rep) {
        every1.push_back(run_distillation(w.train, with(w, w.lambda0, 1), pools).trace.mean_wall_ms());
        auto r5 = run_distillation(w.train, with(w, w.lambda0, 5), pools);
        every5.push_back(r5.trace.mean_wall_ms());
        cmi_every5 = r5.trace.final_monitor_cmi();
    }
    const double m1 = median(every1), m5 = median(every5);
    report(11, m5 < m1 && cmi_every5 < cmi0, "sparser CMI steps are cheaper and still lower CMI",
           fmt("median ms/iter %.4f at every 5 vs %.4f at every 1; final CMI %.6f vs %.6f at lambda 0", m5, m1,
               cmi_every5, cmi0));
}

}  // namespace

int main() {
    oracle_equivalence();
    decomposition();
    degeneracy();
    invariance_suite();
    gradient_fidelity();
    closed_forms();
    workload_criteria();
    int failures = 0;
    for (const auto& [id, o] : outcomes) {
        std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", id, o.line.c_str());
        failures += o.pass ? 0 : 1;
    }
    std::printf("%s: %d of %zu criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures, outcomes.size());
    return failures ? 1 : 0;
}
