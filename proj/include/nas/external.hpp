#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nas/evaluation.hpp"

namespace nas {

inline constexpr std::string_view kProtocolName = "nas-eval/1";

class EvaluatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed line, unexpected id, bad handshake.
class ProtocolError : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

/// Worker closed its output.
class WorkerExited : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

/// Worker reported an error for a request.
class EvaluatorFailure : public EvaluatorError {
 public:
  explicit EvaluatorFailure(const std::string& message)
      : EvaluatorError("worker reported error: " + message), message_(message) {}
  const std::string& message() const { return message_; }

 private:
  std::string message_;
};

class EvaluatorTimeout : public EvaluatorError {
 public:
  using EvaluatorError::EvaluatorError;
};

/// Bidirectional line channel to one worker.
class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void send_line(std::string_view line) = 0;
  /// Throws EvaluatorTimeout or WorkerExited.
  virtual std::string receive_line(std::chrono::milliseconds timeout) = 0;
};

/// Runs `/bin/sh -c command` with its stdin/stdout connected to pipes.
class SubprocessTransport final : public LineTransport {
 public:
  explicit SubprocessTransport(const std::string& command);
  ~SubprocessTransport() override;
  SubprocessTransport(const SubprocessTransport&) = delete;
  SubprocessTransport& operator=(const SubprocessTransport&) = delete;

  void send_line(std::string_view line) override;
  std::string receive_line(std::chrono::milliseconds timeout) override;

 private:
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

/// In-process transport answering each request line through a callback.
/// The handshake line is queued on construction.
class CallbackTransport final : public LineTransport {
 public:
  using Handler = std::function<std::vector<std::string>(std::string_view request)>;
  CallbackTransport(std::string handshake, Handler handler);

  void send_line(std::string_view line) override;
  std::string receive_line(std::chrono::milliseconds timeout) override;

 private:
  Handler handler_;
  std::vector<std::string> pending_;
  std::size_t next_ = 0;
};

/// One worker connection with one request in flight at a time.
class ExternalEvaluatorClient {
 public:
  explicit ExternalEvaluatorClient(std::unique_ptr<LineTransport> transport,
                                   std::chrono::milliseconds timeout = std::chrono::seconds(3600));

  /// Reads and checks the worker's first line. Throws ProtocolError.
  void handshake();
  const std::string& worker_name() const { return worker_name_; }

  /// Sends one request and waits for the response with the same id.
  double evaluate(const Genotype& genotype, const TrainingUnit& unit);

 private:
  std::unique_ptr<LineTransport> transport_;
  std::chrono::milliseconds timeout_;
  std::string worker_name_;
  bool ready_ = false;
  long long next_id_ = 1;
};

std::string format_request(long long id, const Genotype& genotype, const TrainingUnit& unit);

/// Pool of worker connections; the units of one batch are spread across
/// the workers and scored concurrently. A worker that exits is replaced and
/// the request retried once.
class ExternalEvaluatorPool final : public UnitEvaluator {
 public:
  using TransportFactory = std::function<std::unique_ptr<LineTransport>()>;
  ExternalEvaluatorPool(TransportFactory factory, std::size_t workers,
                        std::chrono::milliseconds timeout = std::chrono::seconds(3600));

  double score(const Genotype& repaired, const TrainingUnit& unit) override;
  std::vector<double> score_batch(const Genotype& repaired, std::span<const TrainingUnit> units) override;

 private:
  std::unique_ptr<ExternalEvaluatorClient> connect();
  double score_with(std::size_t worker, const Genotype& repaired, const TrainingUnit& unit);

  TransportFactory factory_;
  std::chrono::milliseconds timeout_;
  std::vector<std::unique_ptr<ExternalEvaluatorClient>> clients_;
};

}  // namespace nas
