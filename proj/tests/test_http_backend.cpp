#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "dtwin/error.hpp"
#include "dtwin/http_backend.hpp"
#include "test_support.hpp"

using namespace dtwin;
using dtwin::testing::TempDir;

namespace {

// Minimal chat-completion-style server on an ephemeral port.
class FakeProvider {
 public:
  FakeProvider() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      last_body = nlohmann::json::parse(req.body);
      last_auth = req.get_header_value("Authorization");
      if (mode == "429") {
        res.status = 429;
        return;
      }
      if (mode == "503") {
        res.status = 503;
        return;
      }
      if (mode == "400") {
        res.status = 400;
        res.set_content(R"({"error":"bad"})", "application/json");
        return;
      }
      if (mode == "garbage") {
        res.set_content("not json", "text/plain");
        return;
      }
      if (mode == "shape") {
        res.set_content(R"({"choices":[]})", "application/json");
        return;
      }
      nlohmann::json out = {{"model", "served-model"},
                            {"choices", {{{"message", {{"role", "assistant"}, {"content", "ok reply"}}}}}}};
      if (mode != "no-usage") out["usage"] = {{"prompt_tokens", 11}, {"completion_tokens", 4}};
      res.set_content(out.dump(), "application/json");
    });
    server_.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"data":[{"embedding":[0.6,0.8]}]})", "application/json");
    });
    server_.Post("/v1/images/generations", [](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      nlohmann::json out = {{"data", {{{"b64_json", base64_encode("PNGDATA")},
                                       {"revised_prompt", body.at("prompt")}}}}};
      res.set_content(out.dump(), "application/json");
    });
    server_.Post("/v1/files", [this](const httplib::Request& req, httplib::Response& res) {
      uploaded = req.has_file("file") ? req.get_file_value("file").content : "";
      res.set_content(R"({"id":"file-1"})", "application/json");
    });
    server_.Post("/v1/fine_tuning/jobs", [this](const httplib::Request& req, httplib::Response& res) {
      job_body = nlohmann::json::parse(req.body);
      res.set_content(R"({"id":"ftjob-9","model":"base","status":"validating_files"})",
                      "application/json");
    });
    server_.Get(R"(/v1/fine_tuning/jobs/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = ++polls;
      nlohmann::json out = {{"id", req.matches[1].str()}, {"model", "base"}};
      if (n < 2) {
        out["status"] = "running";
      } else if (mode == "ft-fail") {
        out["status"] = "failed";
        out["error"] = {{"message", "quota"}};
      } else {
        out["status"] = "succeeded";
        out["fine_tuned_model"] = "base-tuned";
      }
      res.set_content(out.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeProvider() {
    server_.stop();
    thread_.join();
  }

  HttpBackendConfig config(const std::string& media_dir = "media") const {
    HttpBackendConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/";
    c.api_key = "sk-test";
    c.timeout = std::chrono::seconds(5);
    c.media_dir = media_dir;
    return c;
  }

  std::string mode = "ok";
  nlohmann::json last_body;
  std::string last_auth;
  std::string uploaded;
  nlohmann::json job_body;
  std::atomic<int> polls{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

ComposedPrompt prompt_with(std::vector<std::string> media) {
  auto p = compose(SystemMessage::make("SM"), "describe", {"ctx detail"}, std::move(media));
  return p;
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

TEST(Base64, RoundTrip) {
  for (const std::string& s : std::vector<std::string>{"", "a", "ab", "abc", "abcd", std::string("\0\xff\x10", 3)}) {
    EXPECT_EQ(base64_decode(base64_encode(s)), s);
  }
  EXPECT_EQ(base64_encode("abc"), "YWJj");
  EXPECT_EQ(base64_encode("ab"), "YWI=");
}

TEST(HttpBackendTest, WireFormat) {
  FakeProvider fake;
  HttpBackend be(fake.config());
  SamplingParams params{0.8, 20, 0.1};
  auto raw = be.complete(prompt_with({}), params, "defect-llm");
  EXPECT_EQ(raw.text, "ok reply");
  EXPECT_EQ(raw.model_id, "served-model");
  EXPECT_EQ(raw.prompt_tokens, 11);
  EXPECT_EQ(raw.completion_tokens, 4);
  EXPECT_EQ(fake.last_auth, "Bearer sk-test");
  const auto& body = fake.last_body;
  EXPECT_EQ(body.at("model"), "defect-llm");
  EXPECT_DOUBLE_EQ(body.at("top_p").get<double>(), 0.8);
  EXPECT_EQ(body.at("top_k"), 20);
  ASSERT_EQ(body.at("messages").size(), 3u);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"][1]["content"], "Context: ctx detail");
  EXPECT_EQ(body["messages"][2]["role"], "user");
  EXPECT_EQ(body["messages"][2]["content"], "describe");
}

TEST(HttpBackendTest, LocalImagesInlinedAsDataUrls) {
  TempDir dir;
  dtwin::testing::write_file(dir.file("a.jpg"), "JPEGBYTES");
  FakeProvider fake;
  HttpBackend be(fake.config());
  auto body = be.chat_request(prompt_with({dir.file("a.jpg"), "https://x/y.png"}), {}, "m");
  const auto& parts = body["messages"][2]["content"];
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[0]["type"], "text");
  EXPECT_EQ(parts[1]["image_url"]["url"], "data:image/jpeg;base64," + base64_encode("JPEGBYTES"));
  EXPECT_EQ(parts[2]["image_url"]["url"], "https://x/y.png");
}

TEST(HttpBackendTest, FallbackTokenCountWhenUsageMissing) {
  FakeProvider fake;
  fake.mode = "no-usage";
  HttpBackend be(fake.config());
  auto c = chat(prompt_with({}), {}, be, "m");
  EXPECT_EQ(c.completion_tokens, count_tokens("ok reply"));
  EXPECT_GT(c.prompt_tokens, 0);
}

TEST(HttpBackendTest, StatusMapping) {
  FakeProvider fake;
  HttpBackend be(fake.config());
  auto call = [&] { be.complete(prompt_with({}), {}, "m"); };
  fake.mode = "429";
  EXPECT_EQ(code_of(call), ErrorCode::rate_limit);
  fake.mode = "503";
  EXPECT_EQ(code_of(call), ErrorCode::transport);
  fake.mode = "400";
  EXPECT_EQ(code_of(call), ErrorCode::backend);
  fake.mode = "garbage";
  EXPECT_EQ(code_of(call), ErrorCode::malformed_response);
  fake.mode = "shape";
  EXPECT_EQ(code_of(call), ErrorCode::malformed_response);
}

TEST(HttpBackendTest, UnreachableIsTransport) {
  HttpBackendConfig c;
  c.base_url = "http://127.0.0.1:1/v1";
  c.timeout = std::chrono::seconds(1);
  HttpBackend be(c);
  EXPECT_EQ(code_of([&] { be.complete(prompt_with({}), {}, "m"); }), ErrorCode::transport);
}

TEST(HttpBackendTest, RateLimitIsRetried) {
  FakeProvider fake;
  fake.mode = "429";
  HttpBackend be(fake.config());
  RetryPolicy r;
  r.max_retries = 1;
  r.base_backoff = std::chrono::milliseconds(1);
  EXPECT_EQ(code_of([&] { chat(prompt_with({}), {}, be, "m", r); }), ErrorCode::rate_limit);
}

TEST(HttpBackendTest, EmbeddingsAndImages) {
  TempDir dir;
  FakeProvider fake;
  HttpBackend be(fake.config(dir.file("media")));
  EXPECT_EQ(be.embed("x", "e"), (std::vector<double>{0.6, 0.8}));
  auto img = be.generate_image("rust on steel", "tti");
  EXPECT_EQ(dtwin::testing::read_file(img.locator), "PNGDATA");
  EXPECT_EQ(img.metadata.at("revised_prompt"), "rust on steel");
}

TEST(HttpBackendTest, FinetuneUploadSubmitPoll) {
  TempDir dir;
  dtwin::testing::write_file(dir.file("ds.jsonl"), "{\"prompt\":\"p\",\"response\":\"r\"}\n");
  FakeProvider fake;
  HttpBackend be(fake.config());
  auto job = execute_finetune("base", dir.file("ds.jsonl"), {}, be,
                              {std::chrono::milliseconds(1), std::chrono::seconds(5)});
  EXPECT_EQ(job.status, JobStatus::succeeded);
  EXPECT_EQ(job.result_model_id, "base-tuned");
  EXPECT_EQ(fake.uploaded, "{\"prompt\":\"p\",\"response\":\"r\"}\n");
  EXPECT_EQ(fake.job_body.at("training_file"), "file-1");
  EXPECT_EQ(fake.job_body.at("model"), "base");
}

TEST(HttpBackendTest, FinetuneFailureReported) {
  TempDir dir;
  dtwin::testing::write_file(dir.file("ds.jsonl"), "{\"prompt\":\"p\",\"response\":\"r\"}\n");
  FakeProvider fake;
  fake.mode = "ft-fail";
  HttpBackend be(fake.config());
  auto job = execute_finetune("base", dir.file("ds.jsonl"), {}, be,
                              {std::chrono::milliseconds(1), std::chrono::seconds(5)});
  EXPECT_EQ(job.status, JobStatus::failed);
  EXPECT_EQ(job.error, "quota");
}

TEST(HttpBackendTest, BaseUrlNeedsScheme) {
  HttpBackendConfig c;
  c.base_url = "localhost:8000";
  EXPECT_THROW(HttpBackend{c}, Error);
}
