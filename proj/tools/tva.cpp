// Command-line front end: analyze, rewrite, verify, run-diff.
//
// Exit status: 0 success; 1 a verify check failed or run-diff found a
// divergence; 77 run-diff is not supported on this host; otherwise the
// numeric value of the ErrorCode that stopped the command (see
// include/tva/error.hpp and README.md).

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/utsname.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tva/tva.hpp"

namespace {

constexpr int kCheckFailed = 1;
constexpr int kGated = 77;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) tva::fail(tva::ErrorCode::Io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) tva::fail(tva::ErrorCode::Io, "cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) tva::fail(tva::ErrorCode::Io, "cannot write " + path);
  f.close();
  ::chmod(path.c_str(), 0755);
}

std::uint64_t table_address_from_env() {
  const char* v = std::getenv("TVA_TABLE_ADDRESS");
  if (!v || !*v) return tva::kDefaultTableAddress;
  char* end = nullptr;
  errno = 0;
  const unsigned long long a = std::strtoull(v, &end, 0);
  if (errno || *end) tva::fail(tva::ErrorCode::Usage, std::string("TVA_TABLE_ADDRESS is not a number: ") + v);
  return a;
}

tva::DisassemblyMode parse_mode(const std::string& s) {
  return s == "superset" ? tva::DisassemblyMode::Superset : tva::DisassemblyMode::CetGuided;
}

tva::NotrackPolicy parse_notrack(const std::string& s) {
  if (s == "warn") return tva::NotrackPolicy::Warn;
  if (s == "region") return tva::NotrackPolicy::FallbackRegion;
  return tva::NotrackPolicy::FallbackFunction;
}

std::vector<std::string> split_passes(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& r : raw) {
    std::stringstream ss(r);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
  }
  for (const auto& p : out) (void)tva::make_pass(p);  // validates the name
  return out;
}

nlohmann::ordered_json counts_json(const tva::CountsReport& c) {
  return {{"instructions", c.total_instructions}, {"direct_call", c.direct_call},
          {"direct_jump", c.direct_jump},         {"indirect_call", c.indirect_call},
          {"indirect_jump", c.indirect_jump},     {"conditional_jump", c.conditional_jump}};
}

nlohmann::ordered_json report_json(const tva::AnalyzeReport& r, bool timing) {
  nlohmann::ordered_json j;
  j["binary"] = r.binary;
  j["is_pie"] = r.is_pie;
  j["text_vaddr"] = r.text_vaddr;
  j["original"] = {{"text_size", r.text_size}, {"file_size", r.file_size}};
  for (const auto& m : r.modes) {
    auto& o = j["modes"][std::string(tva::mode_name(m.mode))];
    o["counts"] = counts_json(m.counts);
    o["mapping_candidates"] = m.mapping_candidates;
    o["notrack_sites"] = m.notrack_sites;
    if (m.new_text_size) o["new"]["text_size"] = *m.new_text_size;
    if (m.new_file_size) o["new"]["file_size"] = *m.new_file_size;
    if (!m.rewrite_error.empty()) o["rewrite_error"] = m.rewrite_error;
    if (timing) o["disassembly_seconds"] = m.disassembly_seconds;
  }
  if (r.comparison)
    j["compare"] = {
        {"ratio", r.comparison->ratio}, {"pruned", r.comparison->pruned}, {"subset_holds", r.comparison->subset_holds}};
  return j;
}

// --- run-diff ---

struct RunResult {
  std::string out, err;
  int status = 0;
};

std::string describe_status(int status) {
  if (WIFEXITED(status)) return "exit:" + std::to_string(WEXITSTATUS(status));
  if (WIFSIGNALED(status)) {
    const char* name = sigabbrev_np(WTERMSIG(status));
    return std::string("signal:SIG") + (name ? name : std::to_string(WTERMSIG(status)).c_str());
  }
  return "unknown";
}

RunResult run_capture(const std::string& path, const std::string& argv0, const std::vector<std::string>& args,
                      const std::string& input, int timeout_seconds) {
  int in[2], out[2], err[2];
  if (::pipe2(in, O_CLOEXEC) || ::pipe2(out, O_CLOEXEC) || ::pipe2(err, O_CLOEXEC))
    tva::fail(tva::ErrorCode::Io, "pipe failed");
  const pid_t pid = ::fork();
  if (pid < 0) tva::fail(tva::ErrorCode::Io, "fork failed");
  if (pid == 0) {
    ::dup2(in[0], 0);
    ::dup2(out[1], 1);
    ::dup2(err[1], 2);
    std::vector<char*> argv;
    argv.push_back(const_cast<char*>(argv0.c_str()));
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execv(path.c_str(), argv.data());
    _exit(127);
  }
  ::close(in[0]);
  ::close(out[1]);
  ::close(err[1]);
  ::signal(SIGPIPE, SIG_IGN);
  RunResult r;
  std::size_t written = 0;
  int in_fd = in[1];
  if (input.empty()) {
    ::close(in_fd);
    in_fd = -1;
  }
  int open_fds = 2;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(timeout_seconds);
  bool timed_out = false;
  while (open_fds > 0) {
    pollfd fds[3] = {{out[0], POLLIN, 0}, {err[0], POLLIN, 0}, {in_fd, POLLOUT, 0}};
    const auto left =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      timed_out = true;
      break;
    }
    if (::poll(fds, in_fd >= 0 ? 3 : 2, static_cast<int>(left.count())) < 0 && errno != EINTR) break;
    for (int i = 0; i < 2; ++i) {
      if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      char buf[4096];
      const ssize_t n = ::read(fds[i].fd, buf, sizeof buf);
      if (n > 0) {
        (i == 0 ? r.out : r.err).append(buf, static_cast<std::size_t>(n));
      } else {
        ::close(fds[i].fd);
        (i == 0 ? out[0] : err[0]) = -1;
        --open_fds;
      }
    }
    if (in_fd >= 0 && (fds[2].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const ssize_t n = ::write(in_fd, input.data() + written, input.size() - written);
      if (n > 0) written += static_cast<std::size_t>(n);
      if (n <= 0 || written == input.size()) {
        ::close(in_fd);
        in_fd = -1;
      }
    }
  }
  if (timed_out) ::kill(pid, SIGKILL);
  for (int fd : {out[0], err[0], in_fd})
    if (fd >= 0) ::close(fd);
  ::waitpid(pid, &r.status, 0);
  return r;
}

// --- commands ---

int cmd_analyze(const std::vector<std::string>& paths, const std::string& mode, bool timing, bool json, bool sizes,
                const std::string& notrack) {
  tva::AnalyzeOptions opt;
  if (mode == "superset")
    opt.modes = {tva::DisassemblyMode::Superset};
  else if (mode == "cet")
    opt.modes = {tva::DisassemblyMode::CetGuided};
  opt.rewrite_sizes = sizes;
  opt.rewrite.notrack = parse_notrack(notrack);
  opt.rewrite.table_address = table_address_from_env();
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  bool first = true;
  for (const auto& p : paths) {
    const auto img = tva::load_elf(read_file(p));
    const auto rep = tva::analyze(img, p, opt);
    if (json) {
      all.push_back(report_json(rep, timing));
    } else {
      if (!first) std::cout << "\n";
      std::cout << tva::to_text(rep, timing);
    }
    first = false;
  }
  if (json) std::cout << (paths.size() == 1 ? all[0] : all).dump(2) << "\n";
  return 0;
}

int cmd_rewrite(const std::string& in, const std::string& out, const std::string& mode,
                const std::vector<std::string>& passes, const std::string& libs, int trace_fd, bool red_zone_safe,
                const std::string& notrack) {
  tva::RewriteOptions opt;
  opt.mode = parse_mode(mode);
  opt.notrack = parse_notrack(notrack);
  opt.passes = split_passes(passes);
  opt.libs = libs == "instrument" ? tva::LibraryPolicy::Instrument : tva::LibraryPolicy::Ignore;
  opt.trace_fd = trace_fd;
  opt.red_zone_safe = red_zone_safe;
  opt.table_address = table_address_from_env();
  const auto img = tva::load_elf(read_file(in));
  const auto r = tva::rewrite_elf(img, opt);
  write_file(out, r.bytes);
  const auto& st = r.rewrite.stats;
  auto kv = [](const std::string& k, const std::string& v) { std::cout << k << " = " << v << "\n"; };
  kv("output", out);
  kv("mode", std::string(tva::mode_name(opt.mode)));
  kv("passes", opt.passes.empty() ? "none" : tva::join_passes(opt.passes));
  kv("instructions", std::to_string(st.counts.total_instructions));
  kv("mapping_entries", std::to_string(r.rewrite.final_mapping.mapped_count()));
  kv("original.text_size", std::to_string(st.old_text_size));
  kv("original.file_size", std::to_string(img.bytes.size()));
  kv("new.code_size", std::to_string(st.code_size));
  kv("new.stub_size", std::to_string(st.stub_size));
  kv("new.mapping_table_size", std::to_string(st.mapping_table_size));
  kv("new.region_table_size", std::to_string(st.region_table_size));
  kv("new.text_size", std::to_string(st.new_text_size));
  kv("new.runtime_size", std::to_string(r.bootstrap.size()));
  kv("new.file_size", std::to_string(r.bytes.size()));
  kv("trampolines.jump", std::to_string(st.jump_trampolines));
  kv("trampolines.call", std::to_string(st.call_trampolines));
  kv("trampolines.return", std::to_string(st.return_trampolines));
  kv("direct_branches", std::to_string(st.direct_branches));
  kv("rip_rebased", std::to_string(st.rip_rebased));
  kv("traps.far", std::to_string(st.far_traps));
  kv("traps.rip", std::to_string(st.rip_traps));
  kv("traps.fallthrough", std::to_string(st.fallthrough_traps));
  for (const auto& w : r.disasm.warnings) std::cerr << "warning: " << w << "\n";
  return 0;
}

int cmd_verify(const std::string& orig, const std::string& rewritten) {
  std::vector<std::uint8_t> a, b;
  try {
    a = read_file(orig);
    b = read_file(rewritten);
  } catch (const tva::Error& e) {
    tva::fail(tva::ErrorCode::ParseFailure, e.what());
  }
  const auto rep = tva::verify(a, b);
  for (const auto& c : rep.checks)
    std::cout << c.name << " = " << (c.passed ? "pass" : "FAIL") << (c.passed ? "" : " (" + c.detail + ")") << "\n";
  std::cout << "result = " << (rep.passed() ? "pass" : "FAIL") << "\n";
  return rep.passed() ? 0 : kCheckFailed;
}

bool host_supported() {
  utsname u{};
  return ::uname(&u) == 0 && std::string(u.sysname) == "Linux" && std::string(u.machine) == "x86_64";
}

int cmd_run_diff(const std::string& orig, const std::string& rewritten, const std::vector<std::string>& args,
                 int timeout) {
  if (!host_supported()) {
    std::cout << "result = gated (host is not x86-64 Linux)\n";
    return kGated;
  }
  for (const auto& p : {orig, rewritten}) try {
      (void)tva::load_elf(read_file(p));
    } catch (const tva::Error& e) {
      tva::fail(tva::ErrorCode::ParseFailure, p + ": " + e.what());
    }
  std::string input;
  if (!::isatty(0)) input.assign(std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>());
  const auto a = run_capture(orig, orig, args, input, timeout);
  const auto b = run_capture(rewritten, orig, args, input, timeout);
  const bool same_out = a.out == b.out, same_err = a.err == b.err, same_status = a.status == b.status;
  std::cout << "orig.status = " << describe_status(a.status) << "\n";
  std::cout << "new.status = " << describe_status(b.status) << "\n";
  std::cout << "stdout = " << (same_out ? "identical" : "differs") << "\n";
  std::cout << "stderr = " << (same_err ? "identical" : "differs") << "\n";
  std::string verdict = "identical";
  if (!same_status || !same_out || !same_err) {
    if (WIFSIGNALED(b.status) && !WIFSIGNALED(a.status) && WTERMSIG(b.status) == SIGILL)
      verdict = "divergent:shadow-stack-violation";
    else if (WIFSIGNALED(b.status) && !WIFSIGNALED(a.status) && WTERMSIG(b.status) == SIGSEGV)
      verdict = "divergent:illegal-transfer";
    else if (!same_status)
      verdict = "divergent:status";
    else
      verdict = "divergent:output";
  }
  std::cout << "result = " << verdict << "\n";
  return verdict == "identical" ? 0 : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Static rewriter for x86-64 ELF executables"};
  app.require_subcommand(1);

  auto* analyze = app.add_subcommand("analyze", "Disassemble and report instruction counts and sizes");
  std::vector<std::string> a_paths;
  std::string a_mode = "both", a_notrack = "function";
  bool a_timing = false, a_json = false, a_no_sizes = false;
  analyze->add_option("binary", a_paths, "Input executables")->required()->check(CLI::ExistingFile);
  analyze->add_option("--mode", a_mode, "superset, cet or both")->check(CLI::IsMember({"superset", "cet", "both"}));
  analyze->add_option("--notrack", a_notrack, "NOTRACK policy: warn, function, region")
      ->check(CLI::IsMember({"warn", "function", "region"}));
  analyze->add_flag("--timing", a_timing, "Append wall-clock disassembly times");
  analyze->add_flag("--json", a_json, "Emit JSON instead of key = value lines");
  analyze->add_flag("--no-sizes", a_no_sizes, "Skip the rewrite used for size accounting");

  auto* rewrite = app.add_subcommand("rewrite", "Rewrite an executable");
  std::string r_in, r_out, r_mode = "cet", r_libs = "ignore", r_notrack = "function";
  std::vector<std::string> r_passes;
  int r_trace_fd = 2;
  bool r_red_zone_safe = false;
  rewrite->add_option("input", r_in, "Input executable")->required()->check(CLI::ExistingFile);
  rewrite->add_option("-o,--output", r_out, "Output path")->required();
  rewrite->add_option("--mode", r_mode, "superset or cet")->check(CLI::IsMember({"superset", "cet"}));
  rewrite->add_option("--pass", r_passes, "Comma-separated passes: null, trace, shadow-stack, ibv");
  rewrite->add_option("--libs", r_libs, "ignore or instrument")->check(CLI::IsMember({"ignore", "instrument"}));
  rewrite->add_option("--notrack", r_notrack, "NOTRACK policy: warn, function, region")
      ->check(CLI::IsMember({"warn", "function", "region"}));
  rewrite->add_option("--trace-fd", r_trace_fd, "File descriptor the trace pass writes to");
  rewrite->add_flag("--red-zone-safe", r_red_zone_safe, "Move rsp past the red zone in jump trampolines");

  auto* verify = app.add_subcommand("verify", "Check a rewritten executable against its original");
  std::string v_orig, v_new;
  verify->add_option("original", v_orig)->required();
  verify->add_option("rewritten", v_new)->required();

  auto* diff = app.add_subcommand("run-diff", "Run both executables and compare their behavior");
  std::string d_orig, d_new;
  std::vector<std::string> d_args;
  int d_timeout = 30;
  diff->add_option("original", d_orig)->required();
  diff->add_option("rewritten", d_new)->required();
  diff->add_option("args", d_args, "Arguments passed to both (after --)");
  diff->add_option("--timeout", d_timeout, "Seconds before a run is killed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(tva::ErrorCode::Usage);
  }

  try {
    if (*analyze) return cmd_analyze(a_paths, a_mode, a_timing, a_json, !a_no_sizes, a_notrack);
    if (*rewrite) return cmd_rewrite(r_in, r_out, r_mode, r_passes, r_libs, r_trace_fd, r_red_zone_safe, r_notrack);
    if (*verify) return cmd_verify(v_orig, v_new);
    if (*diff) return cmd_run_diff(d_orig, d_new, d_args, d_timeout);
  } catch (const tva::Error& e) {
    std::cerr << "tva: " << e.what() << "\n";
    return static_cast<int>(e.code());
  }
  return 0;
}
