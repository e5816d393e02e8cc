use serde_json::{json, Value};

fn op(summary: &str, request: Option<&str>, ok: (&str, &str), errors: &[&str]) -> Value {
    let mut responses = serde_json::Map::new();
    responses.insert(
        ok.0.into(),
        json!({ "description": ok.1, "content": { "application/json": {} } }),
    );
    for code in errors {
        responses.insert(
            (*code).into(),
            json!({ "description": error_description(code), "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } }),
        );
    }
    let mut o = json!({ "summary": summary, "responses": responses });
    if let Some(schema) = request {
        o["requestBody"] = json!({
            "required": true,
            "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } }
        });
    }
    o
}

fn error_description(code: &str) -> &'static str {
    match code {
        "401" => "missing or wrong API key",
        "404" => "unknown session",
        "409" => "session concluded or id taken",
        "410" => "session quarantined after a damaged log record",
        "422" => "request does not match the schema",
        "429" => "a turn is already in flight for this session",
        "502" => "upstream provider failure",
        _ => "internal error",
    }
}

/// OpenAPI 3.1 description of the /v1 surface.
pub fn document() -> Value {
    let session = ["401", "404", "410"];
    json!({
        "openapi": "3.1.0",
        "info": { "title": "dxloop", "version": env!("CARGO_PKG_VERSION") },
        "components": {
            "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } },
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["error"],
                    "properties": { "error": {
                        "type": "object",
                        "required": ["code", "message"],
                        "properties": {
                            "code": { "type": "string" },
                            "message": { "type": "string" },
                            "detail": { "type": "object" }
                        }
                    } }
                },
                "CreateSession": {
                    "type": "object",
                    "required": ["patient_id", "first_symptoms"],
                    "properties": {
                        "patient_id": { "type": "string" },
                        "first_symptoms": { "type": "string" },
                        "session_id": { "type": "string", "pattern": "^[A-Za-z0-9_-][A-Za-z0-9_.-]{0,127}$" },
                        "demographics": {
                            "type": "object",
                            "properties": {
                                "age_band": { "type": "string" },
                                "sex": { "type": "string" },
                                "region": { "type": "string" }
                            }
                        }
                    }
                },
                "PatientMessage": {
                    "type": "object",
                    "required": ["text"],
                    "properties": { "text": { "type": "string", "minLength": 1 } }
                },
                "SensorUpload": {
                    "type": "object",
                    "description": "exactly one of records, csv or jsonl",
                    "properties": {
                        "records": { "type": "array", "items": {
                            "type": "object",
                            "required": ["metric", "timestamp", "value"],
                            "properties": {
                                "patient_id": { "type": "string" },
                                "metric": { "type": "string" },
                                "timestamp": { "type": "string" },
                                "value": { "type": ["string", "number"] },
                                "units": { "type": "string" }
                            }
                        } },
                        "csv": { "type": "string" },
                        "jsonl": { "type": "string" }
                    }
                },
                "Consent": {
                    "type": "object",
                    "required": ["granted"],
                    "properties": { "granted": { "type": "boolean" } }
                },
                "SyncRequest": {
                    "type": "object",
                    "required": ["event"],
                    "properties": { "event": { "oneOf": [
                        { "type": "object", "required": ["kind", "patient_id", "window"], "properties": {
                            "kind": { "const": "sensor-hourly" },
                            "patient_id": { "type": "string" },
                            "window": { "type": "object", "properties": {
                                "start": { "type": "string", "format": "date-time" },
                                "end": { "type": "string", "format": "date-time" }
                            } }
                        } },
                        { "type": "object", "required": ["kind", "documents"], "properties": {
                            "kind": { "const": "medical-update" },
                            "documents": { "type": "array", "items": { "type": "object", "properties": {
                                "source_id": { "type": "string" },
                                "kind": { "enum": ["textbook", "dialogue", "sensor", "guideline-aux"] },
                                "text": { "type": "string" }
                            } } }
                        } }
                    ] } }
                }
            }
        },
        "security": [{ "bearer": [] }],
        "paths": {
            "/v1/health": { "get": op("build and session counts", None, ("200", "service is up"), &[]) },
            "/v1/openapi": { "get": op("this document", None, ("200", "OpenAPI document"), &[]) },
            "/v1/sessions": { "post": op(
                "start a consultation and run the first doctor turn",
                Some("CreateSession"),
                ("201", "session metadata and the first TurnResult"),
                &["401", "409", "422", "502"],
            ) },
            "/v1/sessions/{id}": { "get": op("session metadata and transcript", None, ("200", "session view"), &session) },
            "/v1/sessions/{id}/transcript": { "get": op("transcript export as written in-process", None, ("200", "transcript"), &session) },
            "/v1/sessions/{id}/messages": { "post": op(
                "send the patient's reply and run one doctor turn",
                Some("PatientMessage"),
                ("200", "TurnResult"),
                &["401", "404", "409", "410", "422", "429", "502"],
            ) },
            "/v1/sessions/{id}/finalize": { "post": op(
                "conclude the session",
                None,
                ("200", "DiagnosisReport"),
                &["401", "404", "410", "429"],
            ) },
            "/v1/patients/{id}/sensors": { "post": op("ingest wearable records", Some("SensorUpload"), ("200", "IngestReport"), &["401", "422"]) },
            "/v1/patients/{id}/consent": {
                "get": op("sensor consent flag", None, ("200", "consent"), &["401"]),
                "put": op("set sensor consent", Some("Consent"), ("200", "consent"), &["401", "422"])
            },
            "/v1/patients/{id}/sensor-reads": { "get": op("sensor-store reads for the patient", None, ("200", "read counter"), &["401"]) },
            "/v1/kb/sync": { "post": op("apply a knowledge sync event", Some("SyncRequest"), ("200", "SyncReport"), &["401", "422"]) }
        }
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_path_is_versioned() {
        let doc = super::document();
        let paths = doc["paths"].as_object().unwrap();
        assert_eq!(paths.len(), 11);
        assert!(paths.keys().all(|p| p.starts_with("/v1/")));
    }
}
