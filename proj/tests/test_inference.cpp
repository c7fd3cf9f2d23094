#include <gtest/gtest.h>

#include <filesystem>

#include "dtwin/error.hpp"
#include "dtwin/inference.hpp"
#include "test_support.hpp"

using namespace dtwin;
using dtwin::testing::mock_set;
using dtwin::testing::TempDir;

namespace {

MultimodalInput input(std::optional<std::string> text, std::vector<std::string> images = {},
                      std::optional<std::string> video = std::nullopt,
                      Intent intent = Intent::analyze) {
  MultimodalInput in;
  in.text = std::move(text);
  in.images = std::move(images);
  in.video = std::move(video);
  in.intent = intent;
  return in;
}

std::vector<StepKind> kinds(const ModelPlan& p) {
  std::vector<StepKind> out;
  for (const auto& s : p.steps) out.push_back(s.kind);
  return out;
}

std::string manifest(const TempDir& dir, const std::string& name, double seconds) {
  const auto path = dir.file(name);
  dtwin::testing::write_file(path, nlohmann::json{{"duration_s", seconds}}.dump());
  return path;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::internal;
}

}  // namespace

TEST(Route, ModalitySignatures) {
  using K = StepKind;
  EXPECT_EQ(kinds(route(input("describe this"))), (std::vector<K>{K::chat}));
  EXPECT_EQ(kinds(route(input("describe this", {"a.png"}))), (std::vector<K>{K::vision_chat}));
  EXPECT_EQ(kinds(route(input(std::nullopt, {"a.png"}))), (std::vector<K>{K::vision_chat}));
  EXPECT_EQ(kinds(route(input("what", {}, "v.json"))),
            (std::vector<K>{K::sample_frames, K::vision_chat, K::chat}));
  EXPECT_EQ(kinds(route(input(std::nullopt, {}, "v.json"))),
            (std::vector<K>{K::sample_frames, K::vision_chat, K::chat}));
  auto gen = route(input("Steel wheel shows a radial crack", {}, std::nullopt, Intent::generate));
  EXPECT_EQ(kinds(gen), (std::vector<K>{K::chat_expand, K::text_to_image}));
  EXPECT_EQ(gen.expected_output, ExpectedOutput::image);
  auto tex = route(input("rust texture on steel", {"ref.png"}, std::nullopt, Intent::generate));
  EXPECT_EQ(tex.expected_output, ExpectedOutput::texture);
  EXPECT_EQ(route(input("x")).expected_output, ExpectedOutput::report);
}

TEST(Route, InvalidInputs) {
  EXPECT_EQ(code_of([] { route(input(std::nullopt)); }), ErrorCode::validation);
  EXPECT_EQ(code_of([] { route(input("  ")); }), ErrorCode::validation);
  EXPECT_EQ(code_of([] { route(input("x", {"a.png"}, "v.json")); }), ErrorCode::validation);
  EXPECT_EQ(code_of([] { route(input(std::nullopt, {"a.png"}, std::nullopt, Intent::generate)); }),
            ErrorCode::validation);
  EXPECT_EQ(code_of([] { route(input("x", {}, "v.json", Intent::generate)); }), ErrorCode::validation);
}

TEST(FrameTimestamps, Convention) {
  auto ts = frame_timestamps(10, 1);
  ASSERT_EQ(ts.size(), 10u);
  EXPECT_DOUBLE_EQ(ts.front(), 0.0);
  EXPECT_DOUBLE_EQ(ts.back(), 9.0);
  EXPECT_EQ(frame_timestamps(1, 0.5).size(), 1u);
  EXPECT_EQ(frame_timestamps(0, 2).size(), 1u);
  EXPECT_EQ(frame_timestamps(0.1, 30).size(), 3u);
  EXPECT_THROW(frame_timestamps(1, 0), Error);
}

TEST(FrameTimestamps, NonDecreasingInFpsAndDuration) {
  std::size_t prev = 0;
  for (double fps = 0.25; fps <= 8; fps += 0.25) {
    const auto n = frame_timestamps(7.3, fps).size();
    EXPECT_GE(n, prev);
    EXPECT_LE(n, static_cast<std::size_t>(7.3 * fps) + 1);
    prev = n;
  }
  prev = 0;
  for (double d = 0; d <= 20; d += 0.7) {
    const auto n = frame_timestamps(d, 1.5).size();
    EXPECT_GE(n, prev);
    prev = n;
  }
}

TEST(ManifestExtractor, WritesPngFrames) {
  TempDir dir;
  ManifestFrameExtractor ex(dir.file("frames"));
  auto frames = sample_frames(manifest(dir, "clip.json", 3), 1, ex);
  ASSERT_EQ(frames.size(), 3u);
  for (const auto& f : frames) {
    EXPECT_TRUE(std::filesystem::exists(f));
    EXPECT_EQ(dtwin::testing::read_file(f).substr(1, 3), "PNG");
  }
  EXPECT_NE(frames[1].find("clip-t00001000ms.png"), std::string::npos);
  EXPECT_EQ(code_of([&] { sample_frames(dir.file("none.json"), 1, ex); }), ErrorCode::validation);
  EXPECT_EQ(code_of([&] { sample_frames(manifest(dir, "clip.json", 3), 0, ex); }), ErrorCode::validation);
}

TEST(CommandExtractor, RunsConfiguredCommands) {
  TempDir dir;
  CommandFrameExtractor ex("echo 2.5", "printf x > {out}", dir.file("frames"));
  auto frames = sample_frames("video.mp4", 2, ex);
  ASSERT_EQ(frames.size(), 5u);
  EXPECT_EQ(dtwin::testing::read_file(frames[0]), "x");
  CommandFrameExtractor bad("exit 3", "true", dir.file("frames"));
  EXPECT_THROW(sample_frames("video.mp4", 1, bad), Error);
}

TEST(Infer, SingleChatStepUsageEqualsCompletion) {
  auto backends = mock_set();
  auto in = input("Crack on the rail near the joint");
  auto raw = infer(in, route(in), backends, {});
  ASSERT_EQ(raw.steps.size(), 1u);
  EXPECT_TRUE(raw.complete());
  EXPECT_EQ(raw.usage.tokens(), raw.steps[0].usage.tokens());
  EXPECT_EQ(raw.usage.calls, 1);
}

TEST(Infer, VideoPlanLatencyCoversDelays) {
  TempDir dir;
  MockConfig cfg;
  cfg.delay = std::chrono::milliseconds(20);
  auto backends = mock_set(cfg);
  ManifestFrameExtractor ex(dir.file("frames"));
  auto in = input("inspect", {}, manifest(dir, "v.json", 2));
  auto raw = infer(in, route(in), backends, {}, &ex);
  ASSERT_EQ(raw.steps.size(), 3u);
  EXPECT_EQ(raw.frames, 2u);
  EXPECT_EQ(raw.usage.calls, 3);
  EXPECT_GE(raw.usage.latency_ms, 3 * 20);
  std::int64_t tokens = 0, latency = 0;
  for (const auto& s : raw.steps) {
    tokens += s.usage.tokens();
    latency += s.usage.latency_ms;
  }
  EXPECT_EQ(raw.usage.tokens(), tokens);
  EXPECT_EQ(raw.usage.latency_ms, latency);
  EXPECT_NE(raw.steps[1].text.find("[t=0.000s]"), std::string::npos);
  EXPECT_NE(raw.steps[1].text.find("[t=1.000s]"), std::string::npos);
}

TEST(Infer, FramesJoinedInTimestampOrderWithBatches) {
  TempDir dir;
  auto backends = mock_set();
  ManifestFrameExtractor ex(dir.file("frames"));
  InferenceOptions opt;
  opt.frames_per_batch = 2;
  auto in = input(std::nullopt, {}, manifest(dir, "rail_crack.json", 5));
  auto raw = infer(in, route(in), backends, opt, &ex);
  EXPECT_EQ(raw.steps[1].usage.calls, 3);
  const auto& t = raw.steps[1].text;
  EXPECT_LT(t.find("[t=0.000s]"), t.find("[t=2.000s]"));
  EXPECT_LT(t.find("[t=2.000s]"), t.find("[t=4.000s]"));
}

TEST(Infer, ParallelFramesMatchSerial) {
  TempDir dir;
  auto in = input("inspect", {}, manifest(dir, "v.json", 7));
  auto run = [&](bool parallel) {
    auto backends = mock_set();
    ManifestFrameExtractor ex(dir.file(parallel ? "fp" : "fs"));
    InferenceOptions opt;
    opt.parallel_frames = parallel;
    opt.frames_per_batch = 2;
    return infer(in, route(in), backends, opt, &ex);
  };
  auto par = run(true), ser = run(false);
  ASSERT_EQ(par.steps.size(), ser.steps.size());
  for (std::size_t i = 1; i < par.steps.size(); ++i) EXPECT_EQ(par.steps[i].text, ser.steps[i].text);
  EXPECT_EQ(par.usage.tokens(), ser.usage.tokens());
  EXPECT_EQ(par.usage.calls, ser.usage.calls);
}

TEST(Infer, FailingMiddleStepStopsPlan) {
  TempDir dir;
  MockConfig cfg;
  cfg.fail_tasks = {"vision"};
  auto backends = mock_set(cfg);
  ManifestFrameExtractor ex(dir.file("frames"));
  auto in = input("inspect", {}, manifest(dir, "v.json", 2));
  auto plan = route(in);
  auto raw = infer(in, plan, backends, {}, &ex);
  ASSERT_EQ(raw.steps.size(), 2u);
  EXPECT_TRUE(raw.steps[0].ok);
  EXPECT_FALSE(raw.steps[1].ok);
  ASSERT_TRUE(raw.failed_step);
  EXPECT_EQ(*raw.failed_step, 1u);
  auto resp = process(raw, in, plan);
  EXPECT_NE(resp.report_markdown.find("## Incomplete"), std::string::npos);
  EXPECT_FALSE(resp.warnings.empty());
}

TEST(Infer, TransportErrorsPropagate) {
  MockConfig cfg;
  cfg.transient_failures = 100;
  auto backends = mock_set(cfg);
  auto in = input("x");
  EXPECT_EQ(code_of([&] { infer(in, route(in), backends, {}); }), ErrorCode::transport);
}

TEST(Infer, VpiInjectionsReachTheModel) {
  auto backends = mock_set();
  InferenceOptions opt;
  VpiRule r;
  r.id = "radial";
  r.trigger_pattern = "radial crack";
  r.injection_template = "A radial crack is visible on the steel wheel";
  opt.vpi_rules = {r};
  auto in = input("Steel wheel shows a radial crack", {}, std::nullopt, Intent::generate);
  auto raw = infer(in, route(in), backends, opt);
  ASSERT_EQ(raw.steps.size(), 2u);
  EXPECT_NE(raw.steps[0].text.find("A radial crack is visible on the steel wheel"), std::string::npos);
  EXPECT_EQ(raw.steps[1].text, raw.steps[0].text);
}

TEST(ParseFindings, WellFormedBlock) {
  const std::vector<Finding> f = {{"crack", "rail head", "high"}, {"rust", "joint", "low"}};
  auto text = "Summary first.\n\n" + render_findings_block(f) + "\ntrailing";
  auto p = parse_findings(text);
  EXPECT_TRUE(p.block_found);
  EXPECT_FALSE(p.warning);
  EXPECT_EQ(p.findings, f);
}

TEST(ParseFindings, HeaderOptionalAndBlankLinesIgnored) {
  auto p = parse_findings("```findings\ncrack | rail | low\n\n  wear|wheel|medium  \n```");
  ASSERT_EQ(p.findings.size(), 2u);
  EXPECT_EQ(p.findings[1], (Finding{"wear", "wheel", "medium"}));
}

TEST(ParseFindings, MissingBlockIsSilent) {
  auto p = parse_findings("No structured block here.");
  EXPECT_FALSE(p.block_found);
  EXPECT_TRUE(p.findings.empty());
  EXPECT_FALSE(p.warning);
}

TEST(ParseFindings, MalformedBlocksDiscarded) {
  for (const std::string bad :
       {"```findings\ncrack | rail\n```", "```findings\ncrack | rail | low | extra\n```",
        "```findings\ncrack |  | low\n```", "```findings\ncrack | rail | low\n"}) {
    auto p = parse_findings(bad);
    EXPECT_TRUE(p.findings.empty()) << bad;
    EXPECT_TRUE(p.warning) << bad;
  }
}

TEST(Process, ReportWithFindingsTable) {
  auto backends = mock_set();
  auto in = input("Crack on the rail near the joint");
  auto plan = route(in);
  auto resp = process(infer(in, plan, backends, {}), in, plan);
  ASSERT_FALSE(resp.findings.empty());
  EXPECT_EQ(resp.findings[0].defect_type, "crack");
  EXPECT_NE(resp.report_markdown.find("## Summary"), std::string::npos);
  EXPECT_NE(resp.report_markdown.find("## Findings"), std::string::npos);
  EXPECT_EQ(resp.report_markdown.find("```findings"), std::string::npos);
  EXPECT_TRUE(resp.media.empty());
}

TEST(Process, MalformedModelBlockStillReports) {
  MockConfig cfg;
  cfg.task_replies["analyze"] = "Looks bad.\n```findings\ncrack | rail\n```";
  auto backends = mock_set(cfg);
  auto in = input("Crack on the rail");
  auto plan = route(in);
  auto resp = process(infer(in, plan, backends, {}), in, plan);
  EXPECT_TRUE(resp.findings.empty());
  EXPECT_FALSE(resp.report_markdown.empty());
  EXPECT_FALSE(resp.warnings.empty());
}

TEST(Process, GenerationYieldsOneMediaItem) {
  TempDir dir;
  MockConfig cfg;
  cfg.media_dir = dir.file("media");
  auto backends = mock_set(cfg);
  auto in = input("Steel wheel shows a radial crack", {}, std::nullopt, Intent::generate);
  auto plan = route(in);
  auto resp = process(infer(in, plan, backends, {}), in, plan);
  ASSERT_EQ(resp.media.size(), 1u);
  EXPECT_EQ(resp.media[0].kind, "image");
  EXPECT_TRUE(resp.findings.empty());
  EXPECT_FALSE(resp.media[0].metadata_sidecar);
}

TEST(Process, TextureGetsMetadataSidecar) {
  TempDir dir;
  MockConfig cfg;
  cfg.media_dir = dir.file("media");
  auto backends = mock_set(cfg);
  auto in = input("rust on steel texture", {}, std::nullopt, Intent::generate);
  auto plan = route(in);
  auto resp = process(infer(in, plan, backends, {}), in, plan);
  ASSERT_EQ(resp.media.size(), 1u);
  EXPECT_EQ(resp.media[0].kind, "texture");
  ASSERT_TRUE(resp.media[0].metadata_sidecar);
  auto meta = nlohmann::json::parse(dtwin::testing::read_file(*resp.media[0].metadata_sidecar));
  EXPECT_TRUE(meta.is_object());
}

TEST(Process, NoSuccessfulStepIsProcessingError) {
  MockConfig cfg;
  cfg.fail_tasks = {"analyze"};
  auto backends = mock_set(cfg);
  auto in = input("x");
  auto plan = route(in);
  auto raw = infer(in, plan, backends, {});
  EXPECT_EQ(code_of([&] { process(raw, in, plan); }), ErrorCode::processing);
}

TEST(InferenceJson, RequestAliases) {
  auto in = nlohmann::json{{"text", "t"}, {"image_refs", {"a.png"}}, {"intent", "analyze"}}
                .get<MultimodalInput>();
  EXPECT_EQ(in.images, (std::vector<std::string>{"a.png"}));
  auto v = nlohmann::json{{"video_ref", "v.json"}}.get<MultimodalInput>();
  EXPECT_EQ(v.video, "v.json");
}
