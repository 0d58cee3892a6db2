#include <catch2/catch_amalgamated.hpp>

#include <fpbc/specdoc.hpp>

using namespace fpbc;

namespace {

const char* kCtSpec = R"(# clinical CT
modality: computed_tomography
carrier: xray
geometry: parallel_beam, n_angles=128
object: 128x128 nonneg
forward_model: Radon(Pi, n_angles=128) -> Detect(D, gain=1)
noise: Poisson, I_0=1e4
target: PSNR >= 30 dB
system_elements:
  source: xray_tube, kvp=120
  detector: qe=0.8, read_noise_e=5, dark_current=0.1, exposure_s=1
  calibration: angle_offset_deg tol=0.5 sens=1.2
)";

const char* kCassiSpec = R"(modality: cassi
carrier: photon
geometry: coded_aperture, n_bands=28
object: 256x256x28 nonneg
forward_model: Modulate(M) -> Disperse(W) -> Accumulate(Sigma) -> Detect(D)
noise: Gaussian, sigma=0.01
target: PSNR >= 28 dB
system_elements:
  source: broadband_led
  optics: coded_aperture, prism
  detector: qe=0.6
)";

const char* kLensless3d = R"(modality: 3d_lensless
carrier: photon
geometry: single_shot, n_depths=8
object: 128x128x8 nonneg, sparse
forward_model: Convolve_z(C, psf=diffuser(z)) -> Accumulate(Sigma) -> Detect(D)
noise: Poisson I_0=5000 + Gaussian sigma=3
target: PSNR >= 15 dB
system_elements:
  source: broadband_led
  optics: diffuser, feature_scale=1.0, defocus_max=40
  detector: qe=0.9
)";

} // namespace

TEST_CASE("CT block of the worked examples parses") {
    SpecDocument doc = parse_spec(kCtSpec);
    CHECK(doc.modality == "computed_tomography");
    CHECK(doc.carrier == Carrier::xray);
    REQUIRE(doc.forward_model.stages.size() == 2);
    CHECK(doc.forward_model.stages[0].parallel[0].kind == Kind::Pi);
    CHECK(doc.forward_model.stages[1].parallel[0].kind == Kind::D);
    CHECK(doc.noise.kind == NoiseKind::poisson);
    CHECK(doc.noise.i0 == 1e4);
    CHECK(doc.target.metric == Metric::psnr_db);
    CHECK(doc.target.threshold == 30.0);
    CHECK(doc.geometry.at("n_angles") == "128");
    REQUIRE(doc.system_elements.calibration.size() == 1);
    CHECK(doc.system_elements.calibration[0].param_name == "angle_offset_deg");
    CHECK(doc.system_elements.calibration[0].tolerance == 0.5);
    CHECK(doc.system_elements.calibration[0].sensitivity_db_per_unit == 1.2);
    CHECK(validate_schema(doc).empty());
}

TEST_CASE("missing noise line raises MissingField") {
    std::string text = kCtSpec;
    auto pos = text.find("noise:");
    auto end = text.find('\n', pos);
    text.erase(pos, end - pos + 1);
    try {
        parse_spec(text);
        FAIL("expected MissingField");
    } catch (const Error& e) {
        CHECK(e.code() == "MissingField");
        CHECK(std::string(e.what()).find("noise") != std::string::npos);
    }
}

TEST_CASE("duplicate field raises DuplicateField") {
    std::string text = std::string(kCassiSpec) + "carrier: photon\n";
    REQUIRE_THROWS_MATCHES(parse_spec(text), Error, Catch::Matchers::Predicate<Error>([](
        const Error& e) { return e.code() == "DuplicateField"; }));
}

TEST_CASE("unknown carrier raises UnknownCarrier") {
    std::string text = kCassiSpec;
    auto pos = text.find("photon");
    text.replace(pos, 6, "tachyon");
    REQUIRE_THROWS_MATCHES(parse_spec(text), Error, Catch::Matchers::Predicate<Error>([](
        const Error& e) { return e.code() == "UnknownCarrier"; }));
}

TEST_CASE("depth-psf chain of the 3D lensless block") {
    SpecDocument doc = parse_spec(kLensless3d);
    REQUIRE(doc.forward_model.stages.size() == 3);
    const auto& conv = doc.forward_model.stages[0].parallel[0];
    CHECK(conv.kind == Kind::C);
    CHECK(conv.variant == Variant::z);
    CHECK(conv.params.at("psf") == "diffuser(z)");
    CHECK(doc.object.dims == std::vector<std::size_t>{128, 128, 8});
    CHECK(doc.object.constraints == std::vector<std::string>{"sparse"});
    CHECK(doc.noise.kind == NoiseKind::poisson_gaussian);
    CHECK(doc.noise.i0 == 5000.0);
    CHECK(doc.noise.sigma == 3.0);
    CHECK(chain_symbols(doc.forward_model) == "Phi_z->Sigma->D");
}

TEST_CASE("round trip: parse(serialize(doc)) == doc") {
    for (const char* text : {kCtSpec, kCassiSpec, kLensless3d}) {
        SpecDocument doc = parse_spec(text);
        SpecDocument again = parse_spec(serialize_spec(doc));
        CHECK(again == doc);
    }
}

TEST_CASE("unicode modality survives the round trip byte-exact") {
    std::string text = kCassiSpec;
    auto pos = text.find("cassi");
    text.replace(pos, 5, "cassi_\xCE\xBB\xCF\x86"); // UTF-8 lambda+phi
    SpecDocument doc = parse_spec(text);
    CHECK(doc.modality == "cassi_\xCE\xBB\xCF\x86");
    SpecDocument again = parse_spec(serialize_spec(doc));
    CHECK(again.modality == doc.modality);
}

TEST_CASE("CASSI chain serializes in canonical form") {
    SpecDocument doc = parse_spec(kCassiSpec);
    std::string out = serialize_spec(doc);
    CHECK(out.find("forward_model: Modulate(M) -> Disperse(W) -> Accumulate(Sigma) -> "
                   "Detect(D)") != std::string::npos);
}

TEST_CASE("schema issues: qe out of range") {
    SpecDocument doc = parse_spec(kCassiSpec);
    doc.system_elements.detector["qe"] = "1.3";
    auto issues = validate_schema(doc);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].field == "detector.qe");
    CHECK(issues[0].rule == "fraction in (0,1]");
}

TEST_CASE("schema issues: chain must end in Detect") {
    SpecDocument doc = parse_spec(kCassiSpec);
    doc.forward_model.stages.pop_back();
    auto issues = validate_schema(doc);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].field == "forward_model");
    CHECK(issues[0].rule == "must end in Detect");
}

TEST_CASE("schema issues: more than 8 top-level fields") {
    std::string text = std::string(kCassiSpec) + "extra_knob: 3\n";
    SpecDocument doc = parse_spec(text);
    auto issues = validate_schema(doc);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].field == "document");
}

TEST_CASE("valid MRI-style document validates cleanly") {
    const char* mri = R"(modality: mri
carrier: spin
geometry: cartesian_kspace, acceleration=4
object: 64x64 complex
forward_model: Modulate(M, coil) -> Encode(F, kspace) -> Sample(S, stride=4) -> Detect(D)
noise: Gaussian, SNR=30 dB
target: SSIM >= 0.9
system_elements:
  source: magnet_3t
  detector: qe=1, read_noise_e=0, dark_current=0, exposure_s=1
)";
    SpecDocument doc = parse_spec(mri);
    CHECK(doc.object.value_domain == ValueDomain::complex_valued);
    CHECK(doc.noise.snr_db == 30.0);
    CHECK(doc.target.metric == Metric::ssim);
    CHECK(validate_schema(doc).empty());
    CHECK(doc.system_elements.defaulted.empty());
    SpecDocument again = parse_spec(serialize_spec(doc));
    CHECK(again == doc);
}

TEST_CASE("detector defaults are injected and flagged") {
    SpecDocument doc = parse_spec(kCassiSpec);
    CHECK(doc.system_elements.detector.at("qe") == "0.6");
    CHECK(doc.system_elements.detector.at("read_noise_e") == "0");
    std::vector<std::string> want = {"read_noise_e", "dark_current", "exposure_s"};
    CHECK(doc.system_elements.defaulted == want);
}

TEST_CASE("parallel OCT-style stage parses and renders") {
    ChainExpr chain = parse_chain("Propagate(P, d=1) + Propagate(P, d=2) -> "
                                  "Accumulate(Sigma) -> Detect(D)");
    REQUIRE(chain.stages.size() == 3);
    CHECK(chain.stages[0].parallel.size() == 2);
    CHECK(chain_symbols(chain) == "P+P->Sigma->D");
}

TEST_CASE("chain parse errors carry position context") {
    try {
        parse_chain("Modulate(M) -> NotAThing");
        FAIL("expected ChainParseError");
    } catch (const Error& e) {
        CHECK(e.code() == "ChainParseError");
    }
    REQUIRE_THROWS_AS(parse_chain("Transform(Lambda, tier=7)"), Error);
    REQUIRE_THROWS_AS(parse_chain("Disperse_z(W)"), Error);
}
