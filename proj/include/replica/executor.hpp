#pragma once

// Runs one stage command in a sandbox directory layout.
//
// local_process: fork + execve, own process group, cwd = scratch, stdout and
// stderr merged into the log file, environment replaced by the sandbox env
// (plus PATH/HOME/LANG defaults). The data mount is made read-only by file
// permissions and checked by a digest sweep before and after the run.
//
// container_runtime: the argv template is expanded and run the same way.
// Placeholders:
//   {IMAGE} {DATA_MOUNT} {OUTPUT_DIR}      required, exactly once each
//   {SCRATCH_DIR} {INPUT_DIR}             optional, at most once
//   {ENV}      expands to `--env K=V` pairs (container paths substituted)
//   {COMMAND}  expands to the stage command vector
// A placeholder may sit inside a longer argument, e.g. `{DATA_MOUNT}:/data:ro`.
// Inside the container the stage sees /data, /input, /scratch and /output.

#include <fcntl.h>
#include <fnmatch.h>
#include <poll.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "replica/digest.hpp"
#include "replica/errors.hpp"
#include "replica/manifest.hpp"
#include "replica/registry.hpp"

namespace replica {

namespace fs = std::filesystem;

enum class StageStatus { succeeded, failed, timeout, policy_violation };

inline std::string_view to_string(StageStatus s) {
    switch (s) {
    case StageStatus::succeeded: return "succeeded";
    case StageStatus::failed: return "failed";
    case StageStatus::timeout: return "timeout";
    case StageStatus::policy_violation: return "policy_violation";
    }
    return "?";
}

inline std::optional<StageStatus> parse_stage_status(std::string_view s) {
    for (auto v : {StageStatus::succeeded, StageStatus::failed, StageStatus::timeout, StageStatus::policy_violation})
        if (to_string(v) == s) return v;
    return std::nullopt;
}

struct Limits {
    double timeout_seconds = 60;
    std::uint64_t max_output_bytes = kDefaultMaxExportBytes;
};

struct SandboxSpec {
    fs::path data_mount;
    fs::path scratch_dir;
    fs::path output_dir;
    fs::path input_dir;  ///< optional; read-only dependency outputs
    fs::path log_file;   ///< defaults to <scratch_dir>/../stage.log
    std::map<std::string, std::string> env;
    Limits limits;
};

struct StageResult {
    StageStatus status = StageStatus::failed;
    int exit_code = -1;
    double duration = 0;
    std::string log_digest;
    std::map<std::string, std::string> output_digests;
    std::string reason; ///< empty on success
};

enum class BackendKind { local_process, container_runtime };

struct ExecutorBackend {
    BackendKind kind = BackendKind::local_process;
    std::vector<std::string> runtime_command_template;
    std::string image_ref; ///< substituted for {IMAGE}
};

inline constexpr double kKillGraceSeconds = 5.0;

namespace detail {

inline std::size_t count_occurrences(const std::vector<std::string>& argv, std::string_view token) {
    std::size_t n = 0;
    for (const auto& a : argv)
        for (auto pos = a.find(token); pos != std::string::npos; pos = a.find(token, pos + token.size())) ++n;
    return n;
}

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
}

} // namespace detail

/// Throws Error when the template breaks the placeholder or network rules.
inline void validate_backend(const ExecutorBackend& b) {
    if (b.kind == BackendKind::local_process) return;
    const auto& t = b.runtime_command_template;
    if (t.empty()) throw Error("container_runtime: empty command template");
    for (std::string_view ph : {"{IMAGE}", "{DATA_MOUNT}", "{OUTPUT_DIR}"})
        if (detail::count_occurrences(t, ph) != 1)
            throw Error("container_runtime: placeholder " + std::string(ph) + " must appear exactly once");
    for (std::string_view ph : {"{SCRATCH_DIR}", "{INPUT_DIR}", "{ENV}", "{COMMAND}"})
        if (detail::count_occurrences(t, ph) > 1)
            throw Error("container_runtime: placeholder " + std::string(ph) + " may appear at most once");
    bool net_off = false;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == "--network=none" || t[i] == "--net=none") net_off = true;
        if ((t[i] == "--network" || t[i] == "--net") && i + 1 < t.size() && t[i + 1] == "none") net_off = true;
    }
    if (!net_off) throw Error("container_runtime: template must disable networking (--network=none)");
}

inline nlohmann::json to_json(const ExecutorBackend& b) {
    return {{"kind", b.kind == BackendKind::local_process ? "local_process" : "container_runtime"},
            {"runtime_command_template", b.runtime_command_template},
            {"image_ref", b.image_ref}};
}

inline ExecutorBackend backend_from_json(const nlohmann::json& j) {
    ExecutorBackend b;
    auto kind = j.value("kind", std::string("local_process"));
    if (kind == "local_process")
        b.kind = BackendKind::local_process;
    else if (kind == "container_runtime")
        b.kind = BackendKind::container_runtime;
    else
        throw Error("unknown backend kind: " + kind);
    b.runtime_command_template = j.value("runtime_command_template", std::vector<std::string>{});
    b.image_ref = j.value("image_ref", std::string());
    validate_backend(b);
    return b;
}

// ---------------------------------------------------------------------------
// Tree snapshots for the data-immutability sweep.

/// Relative path -> "d" for directories, "l:<target>" for symlinks,
/// file digest otherwise.
inline std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    if (root.empty() || !fs::exists(root)) return out;
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
        auto rel = fs::relative(it->path(), root).generic_string();
        if (it->is_symlink())
            out[rel] = "l:" + fs::read_symlink(it->path()).string();
        else if (it->is_directory())
            out[rel] = "d";
        else
            out[rel] = sha256_file(it->path());
    }
    return out;
}

/// Human-readable first difference between two snapshots, or empty.
inline std::string diff_snapshots(const std::map<std::string, std::string>& before,
                                  const std::map<std::string, std::string>& after) {
    for (const auto& [p, d] : after) {
        auto it = before.find(p);
        if (it == before.end()) return "created " + p;
        if (it->second != d) return "modified " + p;
    }
    for (const auto& [p, d] : before)
        if (!after.count(p)) return "deleted " + p;
    return {};
}

/// Recursively marks a tree read-only (dirs 0555, files 0444).
inline void make_read_only(const fs::path& root) {
    if (!fs::exists(root)) return;
    constexpr auto file_perms = fs::perms::owner_read | fs::perms::group_read | fs::perms::others_read;
    constexpr auto dir_perms = file_perms | fs::perms::owner_exec | fs::perms::group_exec | fs::perms::others_exec;
    std::vector<fs::path> dirs{root};
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
        if (it->is_symlink()) continue;
        if (it->is_directory())
            dirs.push_back(it->path());
        else
            fs::permissions(it->path(), file_perms);
    }
    for (const auto& d : dirs) fs::permissions(d, dir_perms);
}

/// Restores owner write permission so the tree can be removed.
inline void make_writable(const fs::path& root) {
    if (!fs::exists(root) || fs::is_symlink(root)) return;
    fs::permissions(root, fs::perms::owner_all, fs::perm_options::add);
    if (!fs::is_directory(root)) return;
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it)
        if (!it->is_symlink()) fs::permissions(it->path(), fs::perms::owner_all, fs::perm_options::add);
}

inline void remove_tree(const fs::path& root) {
    std::error_code ec;
    make_writable(root);
    fs::remove_all(root, ec);
}

// ---------------------------------------------------------------------------
// Process runner

namespace detail {

inline std::string resolve_executable(const std::string& name) {
    if (name.find('/') != std::string::npos) return name;
    const char* path = std::getenv("PATH");
    std::string dirs = path ? path : "/usr/local/bin:/usr/bin:/bin";
    std::size_t start = 0;
    while (start <= dirs.size()) {
        auto end = dirs.find(':', start);
        if (end == std::string::npos) end = dirs.size();
        fs::path cand = fs::path(dirs.substr(start, end - start)) / name;
        if (::access(cand.c_str(), X_OK) == 0 && !fs::is_directory(cand)) return cand.string();
        start = end + 1;
    }
    return name;
}

struct ProcessOutcome {
    int exit_code = -1;
    bool timed_out = false;
    bool cancelled = false;
    std::string spawn_error;
};

/// Runs argv with envp in cwd, appending merged stdout/stderr to log_fd.
inline ProcessOutcome run_process(const std::vector<std::string>& argv, const std::vector<std::string>& envv,
                                  const fs::path& cwd, int log_fd, double timeout_seconds,
                                  const std::atomic<bool>* cancel) {
    ProcessOutcome out;
    std::string exe = resolve_executable(argv.at(0));
    std::vector<char*> cargv, cenv;
    for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);
    for (const auto& e : envv) cenv.push_back(const_cast<char*>(e.c_str()));
    cenv.push_back(nullptr);
    std::string cwd_s = cwd.string();

    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) throw Error(std::string("pipe: ") + std::strerror(errno));
    // Exec failures are reported through a second close-on-exec pipe.
    int errfds[2];
    if (::pipe2(errfds, O_CLOEXEC) != 0) {
        ::close(fds[0]);
        ::close(fds[1]);
        throw Error(std::string("pipe: ") + std::strerror(errno));
    }
    pid_t pid = ::fork();
    if (pid < 0) {
        for (int fd : {fds[0], fds[1], errfds[0], errfds[1]}) ::close(fd);
        throw Error(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(fds[1], 1);
        ::dup2(fds[1], 2);
        int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) ::dup2(devnull, 0);
        if (::chdir(cwd_s.c_str()) != 0) {
            int e = errno;
            (void)!::write(errfds[1], &e, sizeof e);
            ::_exit(127);
        }
        ::execve(exe.c_str(), cargv.data(), cenv.data());
        int e = errno;
        (void)!::write(errfds[1], &e, sizeof e);
        ::_exit(127);
    }
    ::setpgid(pid, pid); // races with the child's own call; either wins
    ::close(fds[1]);
    ::close(errfds[1]);

    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(
                                             std::chrono::duration<double>(timeout_seconds));
    std::optional<clock::time_point> kill_at;
    bool pipe_open = true, reaped = false;
    int status = 0;
    char buf[65536];

    auto write_log = [&](const char* p, ssize_t n) {
        while (n > 0) {
            ssize_t w = ::write(log_fd, p, static_cast<std::size_t>(n));
            if (w < 0) {
                if (errno == EINTR) continue;
                return;
            }
            p += w;
            n -= w;
        }
    };
    auto terminate = [&] {
        if (!kill_at) {
            ::kill(-pid, SIGTERM);
            kill_at = clock::now() + std::chrono::duration_cast<clock::duration>(
                                         std::chrono::duration<double>(kKillGraceSeconds));
        }
    };

    while (!reaped || pipe_open) {
        if (pipe_open) {
            pollfd p{fds[0], POLLIN, 0};
            int r = ::poll(&p, 1, 50);
            if (r > 0) {
                ssize_t n = ::read(fds[0], buf, sizeof buf);
                if (n > 0)
                    write_log(buf, n);
                else if (n == 0 || (n < 0 && errno != EINTR && errno != EAGAIN))
                    pipe_open = false;
            }
        } else {
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        if (!reaped) {
            pid_t w = ::waitpid(pid, &status, WNOHANG);
            if (w == pid) {
                reaped = true;
                // Kill leftovers of the group so the pipe reaches EOF.
                ::kill(-pid, SIGKILL);
            }
        }
        if (!reaped) {
            auto now = clock::now();
            if (!out.timed_out && !out.cancelled) {
                if (now >= deadline)
                    out.timed_out = true;
                else if (cancel && cancel->load())
                    out.cancelled = true;
                if (out.timed_out || out.cancelled) terminate();
            }
            if (kill_at && now >= *kill_at) ::kill(-pid, SIGKILL);
        }
    }
    ::close(fds[0]);

    int exec_errno = 0;
    if (::read(errfds[0], &exec_errno, sizeof exec_errno) == static_cast<ssize_t>(sizeof exec_errno))
        out.spawn_error = "cannot execute " + argv[0] + ": " + std::strerror(exec_errno);
    ::close(errfds[0]);

    if (WIFEXITED(status))
        out.exit_code = WEXITSTATUS(status);
    else if (WIFSIGNALED(status))
        out.exit_code = 128 + WTERMSIG(status);
    return out;
}

inline std::vector<std::string> build_env(const std::map<std::string, std::string>& env, const fs::path& home) {
    std::map<std::string, std::string> e{{"PATH", "/usr/local/bin:/usr/bin:/bin"},
                                         {"HOME", home.string()},
                                         {"LANG", "C"},
                                         {"LC_ALL", "C"}};
    for (const auto& [k, v] : env) e[k] = v;
    std::vector<std::string> out;
    for (const auto& [k, v] : e) out.push_back(k + "=" + v);
    return out;
}

/// Maps host sandbox paths in env values to container paths.
inline std::map<std::string, std::string> container_env(const SandboxSpec& sb) {
    std::map<std::string, std::string> out = sb.env;
    auto map_path = [&](const std::string& key, const fs::path& host, const char* inside) {
        auto it = out.find(key);
        if (it != out.end() && !host.empty() && fs::path(it->second) == host) it->second = inside;
    };
    map_path("DATA_DIR", sb.data_mount, "/data");
    map_path("INPUT_DIR", sb.input_dir, "/input");
    map_path("SCRATCH_DIR", sb.scratch_dir, "/scratch");
    map_path("OUTPUT_DIR", sb.output_dir, "/output");
    return out;
}

inline std::vector<std::string> expand_template(const ExecutorBackend& b, const StageSpec& stage,
                                                const SandboxSpec& sb) {
    std::vector<std::string> out;
    auto env = container_env(sb);
    for (const auto& arg : b.runtime_command_template) {
        if (arg == "{ENV}") {
            for (const auto& [k, v] : env) {
                out.push_back("--env");
                out.push_back(k + "=" + v);
            }
            continue;
        }
        if (arg == "{COMMAND}") {
            out.insert(out.end(), stage.command.begin(), stage.command.end());
            continue;
        }
        std::string s = arg;
        replace_all(s, "{IMAGE}", b.image_ref);
        replace_all(s, "{DATA_MOUNT}", sb.data_mount.string());
        replace_all(s, "{OUTPUT_DIR}", sb.output_dir.string());
        replace_all(s, "{SCRATCH_DIR}", sb.scratch_dir.string());
        replace_all(s, "{INPUT_DIR}", sb.input_dir.string());
        out.push_back(std::move(s));
    }
    return out;
}

inline bool has_glob(std::string_view p) { return p.find_first_of("*?[") != std::string_view::npos; }

} // namespace detail

inline void check_sandbox(const SandboxSpec& sb) {
    std::vector<fs::path> roots{sb.data_mount, sb.scratch_dir, sb.output_dir};
    if (!sb.input_dir.empty()) roots.push_back(sb.input_dir);
    for (const auto& r : roots) {
        if (!r.is_absolute()) throw Error("sandbox path must be absolute: " + r.string());
        if (!fs::is_directory(r)) throw Error("sandbox directory missing: " + r.string());
    }
    auto within = [](const fs::path& a, const fs::path& b) {
        auto ra = a.lexically_normal().string(), rb = b.lexically_normal().string();
        if (!ra.ends_with('/')) ra += '/';
        if (!rb.ends_with('/')) rb += '/';
        return ra.starts_with(rb);
    };
    for (std::size_t i = 0; i < roots.size(); ++i)
        for (std::size_t j = 0; j < roots.size(); ++j)
            if (i != j && within(roots[i], roots[j]))
                throw Error("sandbox paths overlap: " + roots[i].string() + " and " + roots[j].string());
    for (const char* key : {"STAGE", "COURSE_ID", "SESSION_ID", "SEED"})
        if (!sb.env.count(key)) throw Error(std::string("sandbox env missing ") + key);
}

/// Runs the stage to completion (or timeout/cancel). Blocking; safe to call
/// concurrently for disjoint sandboxes. `cancel`, when set, is polled and
/// terminates the stage like a timeout.
inline StageResult run_stage(const StageSpec& stage, const SandboxSpec& sb, const ExecutorBackend& backend,
                             const std::atomic<bool>* cancel = nullptr) {
    check_sandbox(sb);
    validate_backend(backend);
    if (stage.command.empty()) throw Error("stage command is empty");

    StageResult res;
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path log_path = sb.log_file.empty() ? sb.scratch_dir.parent_path() / "stage.log" : sb.log_file;

    auto data_before = snapshot_tree(sb.data_mount);
    auto input_before = snapshot_tree(sb.input_dir);

    int log_fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (log_fd < 0) throw Error("cannot open log " + log_path.string() + ": " + std::strerror(errno));

    std::vector<std::string> argv;
    std::vector<std::string> envv;
    if (backend.kind == BackendKind::local_process) {
        argv = stage.command;
        envv = detail::build_env(sb.env, sb.scratch_dir);
    } else {
        argv = detail::expand_template(backend, stage, sb);
        envv = detail::build_env({}, sb.scratch_dir);
        if (const char* p = std::getenv("PATH")) envv.push_back(std::string("PATH=") + p);
    }
    detail::ProcessOutcome po;
    try {
        po = detail::run_process(argv, envv, sb.scratch_dir, log_fd, stage.timeout_seconds > 0 ? stage.timeout_seconds
                                                                                              : sb.limits.timeout_seconds,
                                 cancel);
    } catch (...) {
        ::close(log_fd);
        throw;
    }
    if (!po.spawn_error.empty()) {
        std::string line = "replica: " + po.spawn_error + "\n";
        (void)!::write(log_fd, line.data(), line.size());
    }
    ::close(log_fd);
    res.exit_code = po.exit_code;
    res.log_digest = sha256_file(log_path);

    auto finish = [&](StageStatus st, std::string reason) {
        res.status = st;
        res.reason = std::move(reason);
        res.duration = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return res;
    };

    if (auto d = diff_snapshots(data_before, snapshot_tree(sb.data_mount)); !d.empty())
        return finish(StageStatus::policy_violation, "data mount changed: " + d);
    if (auto d = diff_snapshots(input_before, snapshot_tree(sb.input_dir)); !d.empty())
        return finish(StageStatus::policy_violation, "input dir changed: " + d);
    if (po.cancelled) return finish(StageStatus::timeout, "cancelled");
    if (po.timed_out) return finish(StageStatus::timeout, "timeout");
    if (!po.spawn_error.empty()) return finish(StageStatus::failed, po.spawn_error);
    if (po.exit_code != 0) return finish(StageStatus::failed, "exit code " + std::to_string(po.exit_code));

    // Declared outputs: literal paths must exist; glob patterns must match at least one file.
    std::map<std::string, fs::path> found;
    std::vector<std::string> all_files;
    for (auto it = fs::recursive_directory_iterator(sb.output_dir); it != fs::recursive_directory_iterator(); ++it) {
        auto rel = fs::relative(it->path(), sb.output_dir).generic_string();
        if (it->is_symlink()) return finish(StageStatus::policy_violation, "symlink in outputs: " + rel);
        if (it->is_regular_file()) all_files.push_back(rel);
    }
    std::sort(all_files.begin(), all_files.end());
    for (const auto& decl : stage.outputs) {
        bool any = false;
        for (const auto& f : all_files) {
            bool match = detail::has_glob(decl) ? ::fnmatch(decl.c_str(), f.c_str(), FNM_PATHNAME | FNM_PERIOD) == 0
                                                : f == decl;
            if (match) {
                found[f] = sb.output_dir / f;
                any = true;
            }
        }
        if (!any) return finish(StageStatus::failed, "missing output: " + decl);
    }
    std::uint64_t total = 0;
    for (const auto& [rel, p] : found) total += fs::file_size(p);
    if (total > sb.limits.max_output_bytes)
        return finish(StageStatus::policy_violation, "output quota exceeded: " + std::to_string(total) + " bytes");
    for (const auto& [rel, p] : found) res.output_digests[rel] = sha256_file(p);
    return finish(StageStatus::succeeded, {});
}

// ---------------------------------------------------------------------------
// Export

struct ExportSet {
    std::map<std::string, std::string> exported; ///< path -> digest
    std::vector<ExportDecision> denied;
};

/// Applies the access policy to a succeeded result. `forbidden_digests`
/// holds raw data-file digests: an output byte-identical to a raw file is
/// denied even when allowlisted.
inline ExportSet collect_outputs(const StageResult& result, const fs::path& output_dir, const AccessPolicy& policy,
                                 const std::set<std::string>& forbidden_digests = {}) {
    ExportSet out;
    if (result.status != StageStatus::succeeded) return out;
    std::map<std::string, std::uint64_t> sizes;
    for (const auto& [rel, digest] : result.output_digests) sizes[rel] = fs::file_size(output_dir / rel);
    for (auto& d : check_export(sizes, policy)) {
        if (d.allowed && forbidden_digests.count(result.output_digests.at(d.path))) {
            d.allowed = false;
            d.reason = "raw data copy";
        }
        if (d.allowed)
            out.exported[d.path] = result.output_digests.at(d.path);
        else
            out.denied.push_back(std::move(d));
    }
    return out;
}

} // namespace replica
