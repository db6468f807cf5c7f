#include "phenoscope/error.hpp"
#include "phenoscope/pipeline.hpp"
#include "run_fixture.hpp"

#include <doctest.h>

using namespace phenoscope;
namespace pl = phenoscope::pipeline;
using testing::TempDir;

namespace {

Errc error_code(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return Errc::InvalidArgument;
}

int cluster_of_label(const fs::path& run, const std::string& label) {
    const auto records = pl::run_records(run);
    const auto clusters = load_clusters(run);
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].phenotype_label == label) return clusters.assignments[i];
    return -1;
}

ImageRecord rec(const std::string& compound, const std::string& chem, int i) {
    return {"x.png", "P1", "A" + std::to_string(i), 0, compound, chem, {}};
}

}  // namespace

TEST_SUITE("stage drivers") {
    TEST_CASE("reduce, cluster, tsne and metrics complete on a constructed run") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 10, false});
        pl::cluster({run, 6, "raw", 0, 4});
        pl::tsne({run, 5.0, 0, 300});
        const auto gfp = cluster_of_label(run, "gfp_positive");
        const auto out = pl::metrics({run, {"well", "chem_cluster", "phenotype_label"}, std::set<int>{gfp}});

        const RunManifest m = load_run(run);
        for (Stage s : kAllStages) CHECK(m.done(s));
        for (const auto& [artifact, digest] : m.config_hashes) verify_artifact(run, m, artifact);
        CHECK(out.at("ari_vs_phenotype_label").get<double>() == doctest::Approx(1.0));
        CHECK(out.at("fold_reduction").get<double>() == doctest::Approx(6.0));
        CHECK(out.at("kept_clusters") == nlohmann::json::array({gfp}));
        CHECK(out.at("groupings").at("phenotype_label").at("ratio_to_global").get<double>() < 0.01);
        CHECK(out.at("groupings").contains("phenotype_cluster"));
        CHECK(out.at("explained_variance").at("components_needed").get<int>() <= 6);
        CHECK(load_json(run / "metrics.json") == out);
        CHECK(load_tsne(run).coords.rows() == 60);
    }

    TEST_CASE("stage order is enforced and names the missing stage") {
        TempDir tmp;
        try {
            pl::extract({tmp / "run", tmp / "none.onnx"});
            FAIL("expected StageOrderViolation");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::StageOrderViolation);
            CHECK(std::string(e.what()).find("ingest") != std::string::npos);
        }
        const fs::path run = testing::fabricated_run(tmp.path());
        CHECK(error_code([&] { pl::cluster({run, 6}); }) == Errc::StageOrderViolation);
        CHECK(error_code([&] { pl::tsne({run}); }) == Errc::StageOrderViolation);
        CHECK(error_code([&] { pl::metrics({run}); }) == Errc::StageOrderViolation);
    }

    TEST_CASE("rerunning reduce with new settings invalidates clustering; identical rerun does not") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 10, false});
        pl::cluster({run, 3, "pca", 1, 2});
        pl::reduce({run, 10, false});
        CHECK(load_run(run).done(Stage::Cluster));
        pl::reduce({run, 5, false});
        CHECK(load_run(run).status(Stage::Cluster) == StageStatus::Pending);
        CHECK(load_pca(run).n_components() == 5);
    }

    TEST_CASE("bad arguments fail the stage without touching upstream") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 10, false});
        CHECK(error_code([&] { pl::cluster({run, 61}); }) == Errc::KTooLarge);
        CHECK(load_run(run).status(Stage::Cluster) == StageStatus::Failed);
        CHECK(load_run(run).done(Stage::Reduce));
        CHECK(error_code([&] { pl::tsne({run, 30.0}); }) == Errc::PerplexityTooHigh);
        CHECK(error_code([&] { pl::cluster({run, 6, "umap"}); }) == Errc::InvalidArgument);
        CHECK(error_code([&] { pl::reduce({run, 17, false}); }) == Errc::InvalidArgument);
    }

    TEST_CASE("tampered features are detected before use") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        std::string bytes = read_file(run / "features.phn");
        bytes[bytes.size() - 1] ^= 0x01;
        atomic_write(run / "features.phn", bytes);
        CHECK(error_code([&] { pl::reduce({run, 4, false}); }) == Errc::CorruptFile);
        CHECK(load_run(run).status(Stage::Reduce) == StageStatus::Failed);
    }

    TEST_CASE("raw space honours standardize") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 4, true});
        const RowMatrixXd X = pl::load_space(run, load_run(run), "raw");
        const Eigen::RowVectorXd mean = X.colwise().mean();
        CHECK(mean.cwiseAbs().maxCoeff() < 1e-9);
        const Eigen::RowVectorXd var = (X.rowwise() - mean).colwise().squaredNorm() / double(X.rows() - 1);
        CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-9);
        CHECK(pl::load_space(run, load_run(run), "pca").cols() == 4);
    }

    TEST_CASE("elbow writes a non-increasing curve") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 4, false});
        const auto curve = pl::elbow({run, 1, 9, 2, "raw", 0, 3});
        REQUIRE(curve.size() == 5);
        CHECK(curve.front().k == 1);
        CHECK(curve.back().k == 9);
        const auto j = load_json(run / "elbow.json");
        CHECK(j.at("curve").size() == 5);
        for (std::size_t i = 1; i < curve.size(); ++i)
            CHECK(curve[i].mean_intra_cluster_variance <= curve[i - 1].mean_intra_cluster_variance * 1.01);
    }

    TEST_CASE("metrics without kept clusters leaves fold reduction null") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        pl::reduce({run, 4, false});
        pl::cluster({run, 6, "raw", 0, 4});
        const auto out = pl::metrics({run});
        CHECK(out.at("fold_reduction").is_null());
        CHECK(out.at("kept_clusters").empty());
    }

    TEST_CASE("run_records follows feature row order") {
        TempDir tmp;
        const fs::path run = testing::fabricated_run(tmp.path());
        const auto records = pl::run_records(run);
        const auto features = read_matrix(run / "features.phn");
        REQUIRE(records.size() == features.row_ids.size());
        for (std::size_t i = 0; i < records.size(); ++i) CHECK(records[i].key() == features.row_ids[i]);
    }
}

TEST_SUITE("export") {
    TEST_CASE("rows per compound, sorted, with every kept cluster") {
        const std::vector<ImageRecord> r{rec("C2", "CC1", 0), rec("C1", "CC1", 1), rec("C1", "CC1", 2),
                                         rec("C3", "CC2", 3), rec("C4", "CC2", 4)};
        const std::vector<int> a{1, 2, 0, 1, 3};
        const auto e = pl::export_kept(r, a, 4, {0, 1});
        REQUIRE(e.rows.size() == 3);
        CHECK(e.rows[0].compound_id == "C1");
        CHECK(e.rows[1].compound_id == "C2");
        CHECK(e.rows[2].compound_id == "C3");
        CHECK(e.fold_reduction == doctest::Approx(4.0 / 3.0));
        CHECK(e.csv() == "compound_id,chem_cluster_id,kept_cluster_ids\nC1,CC1,0\nC2,CC1,1\nC3,CC2,1\n");
        const auto both = pl::export_kept(r, a, 4, {0, 2});
        CHECK(both.csv() == "compound_id,chem_cluster_id,kept_cluster_ids\nC1,CC1,0;2\n");
    }

    TEST_CASE("nothing kept exports only the header") {
        const std::vector<ImageRecord> r{rec("C1", "CC1", 0)};
        const auto e = pl::export_kept(r, {0}, 1, {});
        CHECK(e.rows.empty());
        CHECK_FALSE(e.fold_reduction.has_value());
        CHECK(e.csv() == "compound_id,chem_cluster_id,kept_cluster_ids\n");
        CHECK_THROWS_AS(pl::export_kept(r, {0, 0}, 1, {0}), Error);
    }
}

TEST_SUITE("extraction on images") {
    TEST_CASE("extract records model, taps and skipped images") {
        if (!testing::have_golden()) {
            MESSAGE("reference model unavailable; skipped");
            return;
        }
        TempDir tmp;
        const auto cfg = testing::six_phenotype_config(1, 2, 32);
        const fs::path manifest = generate_screen(cfg, tmp / "screen");
        const fs::path run = tmp / "run";
        pl::ingest({manifest, std::nullopt, run, true});
        const auto golden = load_json(testing::golden_dir() / "golden.json");
        const fs::path model = testing::golden_dir() / golden.at("model").get<std::string>();

        const auto first = parse_manifest(manifest).front();
        atomic_write(tmp / "screen" / first.image_path, "broken");
        CHECK(error_code([&] { pl::extract({run, model}); }) == Errc::DecodeError);
        CHECK(load_run(run).status(Stage::Extract) == StageStatus::Failed);

        pl::ExtractArgs args{run, model};
        args.skip_failures = true;
        args.batch = 3;
        const RunManifest m = pl::extract(args);
        CHECK(m.done(Stage::Extract));
        CHECK(m.properties.at("skipped_records") == "1");
        CHECK(m.properties.at("feature_dim") == "896");
        CHECK(m.properties.at("taps") == "4:128,7:256,9:512");
        CHECK(m.properties.at("model_sha256") == sha256_file(model));
        const auto f = read_matrix(run / "features.phn");
        CHECK(f.rows() == 11);
        CHECK(f.dim() == 896);
        CHECK(std::find(f.row_ids.begin(), f.row_ids.end(), first.key()) == f.row_ids.end());
        CHECK(pl::run_records(run).size() == 11);

        CHECK(error_code([&] {
                  pl::ExtractArgs bad{run, model};
                  bad.model_sha256 = std::string(64, '0');
                  pl::extract(bad);
              }) == Errc::ModelLoadError);
    }
}
