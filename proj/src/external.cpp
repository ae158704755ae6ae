#include "nas/external.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <exception>
#include <thread>

#include <json.hpp>

namespace nas {

using json = nlohmann::json;

SubprocessTransport::SubprocessTransport(const std::string& command) {
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0) throw EvaluatorError(std::string("pipe: ") + std::strerror(errno));
  if (pipe(out_pipe) != 0) {
    close(in_pipe[0]);
    close(in_pipe[1]);
    throw EvaluatorError(std::string("pipe: ") + std::strerror(errno));
  }
  pid_ = fork();
  if (pid_ < 0) throw EvaluatorError(std::string("fork: ") + std::strerror(errno));
  if (pid_ == 0) {
    // own process group so teardown also reaches grandchildren
    setpgid(0, 0);
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  setpgid(pid_, pid_);
  close(in_pipe[0]);
  close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  fcntl(from_child_, F_SETFD, FD_CLOEXEC);
  signal(SIGPIPE, SIG_IGN);
}

SubprocessTransport::~SubprocessTransport() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    if (waitpid(pid_, &status, WNOHANG) == 0) {
      kill(-pid_, SIGTERM);
      waitpid(pid_, &status, 0);
    }
    kill(-pid_, SIGKILL);
  }
}

void SubprocessTransport::send_line(std::string_view line) {
  std::string data(line);
  data += '\n';
  std::size_t written = 0;
  while (written < data.size()) {
    const ssize_t n = write(to_child_, data.data() + written, data.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw WorkerExited("worker input closed");
    }
    written += static_cast<std::size_t>(n);
  }
}

std::string SubprocessTransport::receive_line(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) throw EvaluatorTimeout("no response from worker within timeout");
    pollfd pfd{from_child_, POLLIN, 0};
    const int ready = poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("poll: ") + std::strerror(errno));
    }
    if (ready == 0) continue;
    char chunk[4096];
    const ssize_t n = read(from_child_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw EvaluatorError(std::string("read: ") + std::strerror(errno));
    }
    if (n == 0) throw WorkerExited("worker closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

CallbackTransport::CallbackTransport(std::string handshake, Handler handler) : handler_(std::move(handler)) {
  pending_.push_back(std::move(handshake));
}

void CallbackTransport::send_line(std::string_view line) {
  for (auto& reply : handler_(line)) pending_.push_back(std::move(reply));
}

std::string CallbackTransport::receive_line(std::chrono::milliseconds) {
  if (next_ >= pending_.size()) throw EvaluatorTimeout("mock worker has no pending line");
  return pending_[next_++];
}

ExternalEvaluatorClient::ExternalEvaluatorClient(std::unique_ptr<LineTransport> transport,
                                                 std::chrono::milliseconds timeout)
    : transport_(std::move(transport)), timeout_(timeout) {}

void ExternalEvaluatorClient::handshake() {
  const std::string line = transport_->receive_line(timeout_);
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::exception&) {
    throw ProtocolError("malformed handshake: " + line);
  }
  if (!doc.is_object() || !doc.contains("protocol") || doc["protocol"] != kProtocolName)
    throw ProtocolError("unsupported worker protocol: " + line);
  worker_name_ = doc.value("name", std::string{});
  ready_ = true;
}

std::string format_request(long long id, const Genotype& genotype, const TrainingUnit& unit) {
  nlohmann::ordered_json doc;
  doc["id"] = id;
  doc["genotype"] = genotype.to_ints();
  doc["partitioning"] = unit.partitioning;
  doc["fold"] = unit.fold;
  doc["seed"] = unit.seed;
  return doc.dump();
}

double ExternalEvaluatorClient::evaluate(const Genotype& genotype, const TrainingUnit& unit) {
  if (!ready_) handshake();
  const long long id = next_id_++;
  transport_->send_line(format_request(id, genotype, unit));
  const std::string line = transport_->receive_line(timeout_);
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::exception&) {
    throw ProtocolError("malformed response: " + line);
  }
  if (!doc.is_object() || !doc.contains("id") || !doc["id"].is_number_integer())
    throw ProtocolError("response without integer id: " + line);
  if (doc["id"].get<long long>() != id)
    throw ProtocolError("response id " + doc["id"].dump() + " does not match request id " + std::to_string(id));
  if (doc.contains("error")) {
    throw EvaluatorFailure(doc["error"].is_string() ? doc["error"].get<std::string>() : doc["error"].dump());
  }
  if (!doc.contains("score") || !doc["score"].is_number()) throw ProtocolError("response without score: " + line);
  const double score = doc["score"].get<double>();
  if (!(score >= 0.0 && score <= 1.0)) throw ProtocolError("score outside [0, 1]: " + line);
  return score;
}

ExternalEvaluatorPool::ExternalEvaluatorPool(TransportFactory factory, std::size_t workers,
                                             std::chrono::milliseconds timeout)
    : factory_(std::move(factory)), timeout_(timeout) {
  if (workers == 0) throw ConfigError("external evaluator needs at least one worker");
  for (std::size_t i = 0; i < workers; ++i) clients_.push_back(connect());
}

std::unique_ptr<ExternalEvaluatorClient> ExternalEvaluatorPool::connect() {
  auto client = std::make_unique<ExternalEvaluatorClient>(factory_(), timeout_);
  client->handshake();
  return client;
}

double ExternalEvaluatorPool::score_with(std::size_t worker, const Genotype& repaired, const TrainingUnit& unit) {
  try {
    return clients_[worker]->evaluate(repaired, unit);
  } catch (const WorkerExited&) {
    clients_[worker] = connect();
    return clients_[worker]->evaluate(repaired, unit);
  }
}

double ExternalEvaluatorPool::score(const Genotype& repaired, const TrainingUnit& unit) {
  return score_with(0, repaired, unit);
}

std::vector<double> ExternalEvaluatorPool::score_batch(const Genotype& repaired, std::span<const TrainingUnit> units) {
  std::vector<double> out(units.size());
  const std::size_t n_workers = std::min(clients_.size(), units.size());
  if (n_workers <= 1) {
    for (std::size_t i = 0; i < units.size(); ++i) out[i] = score(repaired, units[i]);
    return out;
  }
  std::vector<std::exception_ptr> errors(n_workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < n_workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < units.size(); i += n_workers) out[i] = score_with(w, repaired, units[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace nas
