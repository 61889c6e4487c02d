#include "gavatar/io.hpp"
#include "gavatar/synthdata.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

using namespace gavatar;
using namespace gavatar::synthdata;
namespace fs = std::filesystem;

namespace {

GenerateOptions small_options(std::uint64_t seed = 3) {
  GenerateOptions o;
  o.identities = 2;
  o.views = 4;
  o.expressions = 3;
  o.resolution = 32;
  o.seed = seed;
  o.tmpl.rings = 16;
  o.tmpl.segments = 20;
  return o;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gavatar_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double sum(const Image& img) {
  double s = 0;
  for (double v : img.data) s += v;
  return s;
}

}  // namespace

TEST(Synthdata, BundleCountAndOrdering) {
  const Dataset d = generate_dataset(small_options());
  ASSERT_EQ(d.frames.size(), 24u);
  const Frame& f = d.frame(1, 2, 3);
  EXPECT_EQ(f.identity, 1);
  EXPECT_EQ(f.expression, 2);
  EXPECT_EQ(f.view, 3);
  EXPECT_EQ(d.select(0, {0}).size(), 4u);
  EXPECT_THROW(d.frame(2, 0, 0), DimensionError);
}

TEST(Synthdata, MasksNonEmptyAndInsideImage) {
  const Dataset d = generate_dataset(small_options());
  for (const Frame& f : d.frames) {
    EXPECT_GT(sum(f.bundle.mask), 0.0);
    EXPECT_TRUE(f.bundle.mask.height == f.bundle.image.height && f.bundle.mask.width == f.bundle.image.width);
    for (size_t i = 0; i < f.bundle.mask.size(); ++i) {
      const double m = f.bundle.mask.data[i];
      EXPECT_TRUE(m == 0.0 || m == 1.0);
      if (f.bundle.mouth.data[i] > 0) EXPECT_EQ(m, 1.0);
    }
  }
  // Frontal view of the neutral face shows the mouth.
  GenerateOptions o = small_options();
  o.views = 1;
  EXPECT_GT(sum(generate_dataset(o).frame(0, 0, 0).bundle.mouth), 0.0);
}

TEST(Synthdata, NeutralIsExactAndParamsReproduceMesh) {
  const Dataset d = generate_dataset(small_options());
  for (const auto& id : d.identities) {
    EXPECT_EQ(id.expressions[0].theta.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(id.expressions[0].phi.cwiseAbs().maxCoeff(), 0.0);
  }
  // Re-rendering from the stored params reproduces the stored image.
  const Frame& f = d.frame(1, 2, 1);
  MeshImages again = render_mesh(d.tmpl, headmodel::pose_mesh(d.tmpl, f.bundle.params),
                                 d.identities[1].albedo, f.bundle.camera);
  io::quantize8(again.rgb);
  EXPECT_EQ(again.rgb.data, f.bundle.image.data);
  EXPECT_EQ(again.mask.data, f.bundle.mask.data);
}

TEST(Synthdata, DistinctIdentitiesDiffer) {
  const Dataset d = generate_dataset(small_options());
  double diff = 0;
  for (size_t i = 0; i < d.frame(0, 0, 0).bundle.image.size(); ++i)
    diff += std::abs(d.frame(0, 0, 0).bundle.image.data[i] - d.frame(1, 0, 0).bundle.image.data[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Synthdata, SameSeedByteIdenticalOnDisk) {
  const fs::path a = temp_dir("a"), b = temp_dir("b");
  write_dataset(generate_dataset(small_options()), a);
  write_dataset(generate_dataset(small_options()), b);
  size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_GT(files, 24u * 3);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synthdata, LoadRoundTrip) {
  const fs::path dir = temp_dir("rt");
  const Dataset d = generate_dataset(small_options(9));
  write_dataset(d, dir);
  const Dataset l = load_dataset(dir);
  ASSERT_EQ(l.frames.size(), d.frames.size());
  EXPECT_EQ(l.tmpl.vertices, d.tmpl.vertices);
  for (size_t i = 0; i < d.frames.size(); ++i) {
    EXPECT_EQ(l.frames[i].bundle.image.data, d.frames[i].bundle.image.data);
    EXPECT_EQ(l.frames[i].bundle.mouth.data, d.frames[i].bundle.mouth.data);
    EXPECT_EQ(l.frames[i].bundle.params.phi, d.frames[i].bundle.params.phi);
    EXPECT_EQ(l.frames[i].bundle.params.delta, d.frames[i].bundle.params.delta);
    EXPECT_EQ(l.frames[i].bundle.camera.E, d.frames[i].bundle.camera.E);
  }
  EXPECT_EQ(l.identities[1].albedo.skin, d.identities[1].albedo.skin);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW(load_dataset(dir), Error);
  fs::remove_all(dir);
}

TEST(Synthdata, RigsSeeTheHead) {
  const auto tmpl = headmodel::make_synthetic_template();
  const auto id = make_identity(tmpl, 5, 1);
  const auto posed = headmodel::pose_mesh(tmpl, id.base);
  auto cams = make_rig(16, 32);
  const auto ref = reference_rig(32);
  cams.insert(cams.end(), ref.begin(), ref.end());
  ASSERT_EQ(cams.size(), 32u);
  for (const auto& c : cams) {
    const MeshImages m = render_mesh(tmpl, posed, id.albedo, c);
    EXPECT_GT(sum(m.mask), 32.0 * 32 * 0.1);
    // Border stays mostly empty so the head is framed.
    double border = 0;
    for (int x = 0; x < 32; ++x) border += m.mask.at(0, 0, x);
    EXPECT_LT(border, 8.0);
  }
}

TEST(PngIo, RoundTripAndErrors) {
  const fs::path dir = temp_dir("png");
  fs::create_directories(dir);
  Image img(3, 5, 7);
  for (size_t i = 0; i < img.size(); ++i) img.data[i] = (i % 256) / 255.0;
  io::write_png(dir / "a.png", img);
  EXPECT_EQ(io::read_png(dir / "a.png").data, img.data);
  EXPECT_THROW(io::write_png(dir / "b.png", Image(2, 3, 3)), DimensionError);
  EXPECT_THROW(io::read_png(dir / "missing.png"), Error);
  std::ofstream(dir / "bad.png") << "not a png";
  EXPECT_THROW(io::read_png(dir / "bad.png"), FormatError);
  fs::remove_all(dir);
}
