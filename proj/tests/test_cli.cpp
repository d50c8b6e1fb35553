#include <cstdlib>
#include <filesystem>
#include <limits>
#include <string>
#include <sys/wait.h>

#include <doctest.h>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/image_io.hpp"

using namespace despeckle;
namespace fs = std::filesystem;

namespace {

int cli(const std::string& args)
{
    const std::string cmd = std::string("\"") + DESPECKLE_CLI + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch()
{
    const auto dir = fs::temp_directory_path() / "despeckle_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("exit codes")
{
    const auto dir = scratch();
    const std::string d = "\"" + dir.string() + "\"";
    CHECK(cli("--help") == 0);
    CHECK(cli("") == 1);
    CHECK(cli("bogus") == 1);
    CHECK(cli("train -m x.json -o " + d + "/run") == 1); // no seed
    CHECK(cli("train -m " + d + "/missing.json -o " + d + "/run --seed 1") == 2);
    CHECK(cli("evaluate -m " + d + "/missing.json --despeckled x -o y") == 2);

    IntensityImage img(20, 20);
    for (auto& v : img.values())
        v = 50.0;
    save_raw(img, dir / "noisy.raw");

    NetConfig cfg;
    cfg.depth = 2;
    cfg.width = 4;
    auto net = build_network(cfg, 1);
    net.state().metadata["normalization"] = "fixed:255";
    save_checkpoint(net.state(), dir / "ok.ckpt");
    CHECK(cli("despeckle --checkpoint " + d + "/ok.ckpt -i " + d + "/noisy.raw -o " + d +
              "/out.raw -L 1 --tile 32 --overlap 4") == 0);
    CHECK(load_image(dir / "out.raw").height() == 20);
    CHECK(cli("despeckle --checkpoint " + d + "/ok.ckpt -i " + d + "/noisy.raw -o " + d +
              "/out.raw -L 1 --tile 32 --overlap 1") == 1);

    for (auto& p : net.parameters())
        p = std::numeric_limits<float>::quiet_NaN();
    save_checkpoint(net.state(), dir / "nan.ckpt");
    CHECK(cli("despeckle --checkpoint " + d + "/nan.ckpt -i " + d + "/noisy.raw -o " + d +
              "/nan.raw -L 1 --tile 32 --overlap 4") == 3);
}
