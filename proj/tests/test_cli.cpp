#include "promptseg/service.hpp"

#include "promptseg/data_io.hpp"
#include "service_fixtures.hpp"

#include <doctest.h>
#include <fmt/format.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace promptseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "promptseg_test_cli";
const fs::path kSource = PROMPTSEG_SOURCE_DIR;

struct RunResult {
    int exit_code = -1;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    fs::create_directories(kDir);
    const fs::path err = kDir / "stderr.txt";
    const std::string cmd = std::string(PROMPTSEG_CLI) + " " + args + " > " + (kDir / "stdout.txt").string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    std::ifstream in(err);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

std::string read_text(const fs::path& p) {
    const auto bytes = read_file(p);
    return {bytes.begin(), bytes.end()};
}

json last_json_line(const std::string& text) {
    const auto end = text.find_last_not_of('\n');
    const auto start = text.rfind('\n', end);
    return json::parse(text.substr(start == std::string::npos ? 0 : start + 1, end + 1));
}

} // namespace

TEST_CASE("segment writes its artifacts") {
    const auto scene = service_fixtures::write_scene(kDir / "in", "brain", "tumor", 30, 26, 12);
    const fs::path out = kDir / "brain_out";
    fs::remove_all(out);
    const RunResult r = run_cli("segment --image " + quoted(scene.image) + " --prompt \"brain tumor\" --gt " +
                                quoted(scene.gt) + " --out-dir " + quoted(out));
    REQUIRE(r.exit_code == 0);
    for (const char* f : {"mask.png", "boxes.json", "saliency.npy", "saliency.png", "provenance.json", "metrics.json"})
        CHECK(fs::exists(out / f));
    CHECK(json::parse(read_text(out / "metrics.json"))["dsc"].get<double>() > 0.8);
    CHECK(json::parse(read_text(out / "provenance.json"))["prompt"] == "brain tumor");
}

TEST_CASE("CLI and API outputs are bit-identical") {
    const auto scene = service_fixtures::write_scene(kDir / "in", "brain", "tumor", 30, 26, 12);
    const fs::path out = kDir / "parity";
    fs::remove_all(out);
    REQUIRE(run_cli("segment --image " + quoted(scene.image) + " --prompt tumor --top-k 6 --gt " +
                    quoted(scene.gt) + " --out-dir " + quoted(out))
                .exit_code == 0);

    const AppContext ctx(AppConfig{});
    const ApiResponse api = handle_segment(ctx, {{"image", base64_encode(read_file(scene.image))},
                                                 {"prompt", "tumor"},
                                                 {"params", {{"top_k", 6}}},
                                                 {"gt", base64_encode(read_file(scene.gt))}});
    REQUIRE(api.status == 200);
    const json& j = api.body;
    CHECK(base64_decode(j["mask"]["data"].get<std::string>()) == read_file(out / "mask.png"));
    CHECK(base64_decode(j["saliency"]["raw"]["data"].get<std::string>()) == read_file(out / "saliency.npy"));
    CHECK(base64_decode(j["saliency"]["heatmap"]["data"].get<std::string>()) == read_file(out / "saliency.png"));
    CHECK(j["boxes"].dump(2) + "\n" == read_text(out / "boxes.json"));
    CHECK(j["provenance"].dump(2) + "\n" == read_text(out / "provenance.json"));
    CHECK(j["metrics"].dump(2) + "\n" == read_text(out / "metrics.json"));
}

TEST_CASE("saliency subcommand writes npy and heatmap") {
    const auto scene = service_fixtures::write_scene(kDir / "in", "brain", "tumor", 30, 26, 12);
    const fs::path out = kDir / "sal" / "map.npy";
    REQUIRE(run_cli("saliency --image " + quoted(scene.image) + " --prompt tumor --method gradcam --out " +
                    quoted(out))
                .exit_code == 0);
    const Map m = load_npy(out);
    CHECK(m.rows() == 64);
    CHECK(fs::exists(kDir / "sal" / "map.png"));
}

TEST_CASE("eval-seg reproduces the golden report") {
    const fs::path fx = kSource / "tests" / "fixtures" / "eval_seg";
    const fs::path report = kDir / "report.csv", records = kDir / "records.csv";
    REQUIRE(run_cli("eval-seg --pred-dir " + quoted(fx / "pred") + " --gt-dir " + quoted(fx / "gt") +
                    " --scores-dir " + quoted(fx / "scores") +
                    " --method fixture --modality synthetic --out " + quoted(report) + " --records " +
                    quoted(records))
                .exit_code == 0);
    CHECK(read_text(report) == read_text(kSource / "tests" / "golden" / "eval_seg_report.csv"));
    CHECK(read_text(records) == read_text(kSource / "tests" / "golden" / "eval_seg_records.csv"));
}

TEST_CASE("usage errors exit 2") {
    RunResult r = run_cli("segment --image x.png --prompt tumor --out-dir o --bogus");
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(last_json_line(r.err)["error"]["code"] == "UnknownCommand");
    CHECK(run_cli("frobnicate").exit_code == 2);
    CHECK(run_cli("").exit_code == 2);
    CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("failures exit 1 with structured stderr") {
    const auto scene = service_fixtures::write_scene(kDir / "in", "brain", "tumor", 30, 26, 12);
    RunResult r = run_cli("segment --image " + quoted(scene.image) + " --prompt ' ' --out-dir " +
                          quoted(kDir / "empty"));
    CHECK(r.exit_code == 1);
    CHECK(last_json_line(r.err)["error"]["code"] == "EmptyPrompt");

    r = run_cli("segment --image " + quoted(kDir / "missing.png") + " --prompt tumor --out-dir " +
                quoted(kDir / "empty"));
    CHECK(r.exit_code == 1);
    CHECK(last_json_line(r.err)["error"]["code"] == "IoError");

    r = run_cli("predict --ckpt " + quoted(scene.gt) + " --image " + quoted(scene.image) + " --out " +
                quoted(kDir / "p.png"));
    CHECK(r.exit_code == 1);
    CHECK(last_json_line(r.err)["error"]["code"] == "CheckpointCorrupt");
}

TEST_CASE("training, retrieval and prediction subcommands run end to end") {
    const fs::path root = kDir / "corpus";
    fs::remove_all(root);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    SyntheticDualEncoder enc;
    std::string captions = "image,caption\n";
    json splits = {{"train", json::array()}, {"val", json::array()}};
    for (int i = 0; i < 12; ++i) {
        const auto& c = enc.concepts()[i % enc.concepts().size()];
        const std::string id = fmt::format("img{:02d}", i);
        const Mask m = testing_support::disk_mask(enc.input_size(), 20 + i, 24 + 2 * i, 9 + i % 3);
        save_image(root / "images" / (id + ".png"), enc.render({{enc.concept_index(c.token), m}}));
        save_mask(root / "masks" / (id + ".png"), m);
        captions += fmt::format("images/{}.png,scan showing the {}\n", id, c.token);
        splits[i < 8 ? "train" : "val"].push_back(id);
    }
    write_text(root / "captions.csv", captions);
    write_text(root / "splits.json", splits.dump());

    RunResult r = run_cli("eval-retrieval --captions " + quoted(root / "captions.csv") +
                          " --batch-size 4 --runs 2 --model synthetic --out " + quoted(kDir / "retrieval.csv"));
    REQUIRE(r.exit_code == 0);
    const std::string csv = read_text(kDir / "retrieval.csv");
    CHECK(csv.rfind("model,direction,K,mean,std\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(csv.find("synthetic,text_to_image,2,") != std::string::npos);

    const json ft = {{"data", {{"train", "corpus/captions.csv"}, {"val", "corpus/captions.csv"}}},
                     {"model", {{"embed_dim", 8}, {"height", 32}, {"width", 32}, {"seed", 1}}},
                     {"train",
                      {{"learning_rate", 1e-2}, {"batch_size", 4}, {"max_steps", 6}, {"checkpoint_dir", "ft"}}}};
    write_text(kDir / "finetune.json", ft.dump());
    r = run_cli("finetune --config " + quoted(kDir / "finetune.json"));
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(kDir / "ft" / "best.json"));
    CHECK(fs::exists(kDir / "ft" / "manifest.json"));

    const json weak = {{"data", {{"root", "corpus"}}},
                       {"model", {{"depth", 2}, {"base_channels", 4}}},
                       {"train", {{"epochs", 2}, {"batch_size", 4}, {"checkpoint_path", "weak.ckpt"}}}};
    write_text(kDir / "weak.json", weak.dump());
    r = run_cli("train-weak --config " + quoted(kDir / "weak.json"));
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists(kDir / "weak.ckpt"));

    r = run_cli("predict --ckpt " + quoted(kDir / "weak.ckpt") + " --image " +
                quoted(root / "images" / "img09.png") + " --out " + quoted(kDir / "pred.png") + " --probs " +
                quoted(kDir / "pred.npy"));
    REQUIRE(r.exit_code == 0);
    CHECK(load_mask(kDir / "pred.png").rows() == enc.input_size().height);
    CHECK(load_npy(kDir / "pred.npy").cols() == enc.input_size().width);
}
