// Serial reference against the OpenMP kernels: grid density and the
// replicate loop of modelled overlap.
#include <benchmark/benchmark.h>
#include <omp.h>

#include "mmo/design.hpp"
#include "mmo/kde.hpp"
#include "mmo/metrics.hpp"
#include "mmo/rng.hpp"
#include "mmo/simulate.hpp"
#include "mmo/synth.hpp"

namespace {

Eigen::MatrixX2d cloud(Eigen::Index n, std::uint64_t seed, double shift) {
    mmo::Gaussian2D g;
    g.mean << shift, 0.0;
    return mmo::sample_gaussian(g, n, seed);
}

struct Setup {
    Eigen::MatrixX2d p, q;
    mmo::kde::Bandwidth bw;
    mmo::kde::Grid grid;
    explicit Setup(Eigen::Index n) : p(cloud(n, 1, 0.0)), q(cloud(n, 2, 1.0)) {
        bw = mmo::kde::pooled_bandwidth(p, q);
        grid = mmo::kde::make_grid(p, q, bw, 100, 3.0);
    }
};

void BM_DensityReference(benchmark::State& st) {
    const Setup s(st.range(0));
    for (auto _ : st) benchmark::DoNotOptimize(mmo::kde::density_reference(s.p, s.grid, s.bw));
    st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_DensitySerial(benchmark::State& st) {
    const Setup s(st.range(0));
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    for (auto _ : st) benchmark::DoNotOptimize(mmo::kde::density(s.p, s.grid, s.bw));
    omp_set_num_threads(saved);
    st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_DensityParallel(benchmark::State& st) {
    const Setup s(st.range(0));
    for (auto _ : st) benchmark::DoNotOptimize(mmo::kde::density(s.p, s.grid, s.bw));
    st.SetItemsProcessed(st.iterations() * st.range(0));
    st.counters["threads"] = omp_get_max_threads();
}

// Replicate loop of one average-speaker BA estimate.
const mmo::FittedModel& small_model() {
    static const mmo::FittedModel model = [] {
        mmo::TruthSpec spec = mmo::default_truth();
        spec.n_speakers = 10;
        const auto truth = mmo::generate_corpus(spec, 5);
        mmo::ModelSpec ms;
        return mmo::fit(mmo::build_design(truth.table, ms));
    }();
    return model;
}

void replicate_loop(benchmark::State& st, int threads) {
    const auto& model = small_model();
    const int saved = omp_get_max_threads();
    omp_set_num_threads(threads);
    for (auto _ : st) {
        benchmark::DoNotOptimize(mmo::modelled_overlap(model, mmo::Measure::bhattacharyya,
                                                       {{"IH", "oral", {}}, {"EH", "oral", {}}},
                                                       mmo::ScopeSpec::average(), 9, static_cast<int>(st.range(0))));
    }
    omp_set_num_threads(saved);
    st.counters["threads"] = threads;
}

void BM_ReplicatesSerial(benchmark::State& st) { replicate_loop(st, 1); }
void BM_ReplicatesParallel(benchmark::State& st) { replicate_loop(st, omp_get_max_threads()); }

}  // namespace

BENCHMARK(BM_DensityReference)->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DensitySerial)->Arg(1000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DensityParallel)->Arg(1000)->Arg(50000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReplicatesSerial)->Arg(20)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReplicatesParallel)->Arg(20)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
