from __future__ import annotations
import os
import uvicorn

if __name__ == "__main__":
    port = int(os.environ.get("PORT", "8000"))
    uvicorn.run("AutoCal.main:app", host=os.environ.get("HOST", "127.0.0.1"), port=port)
